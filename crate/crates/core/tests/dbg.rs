use specbft_core::consensus::Behavior;
use specbft_core::simnet::{self, trace::Observation, Duration, SimConfig};

#[test]
fn dbg_offline_expulsion() {
    let mut config = SimConfig::honest(4, 21);
    config.duration = Duration::Blocks(200);
    config.time_cap_ms = 3_600_000_000;
    let config = config
        .assign_behavior(3, Behavior::Offline { from_height: 0 })
        .unwrap();
    let out = simnet::run(&config).expect("run");
    for e in &out.trace.events {
        if let Observation::Settled { epoch, distributed, burned, expelled } = &e.what {
            if e.node == 0 {
                println!("settled epoch={epoch} dist={distributed} burned={burned} expelled={expelled}");
            }
        }
    }
    for r in &out.trace.epochs {
        let c3 = r.slot_nodes.iter().filter(|n| **n == 3).count();
        println!("epoch {} node3_slots={} roster={:?}", r.epoch, c3, r.slot_nodes);
    }
}
