use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use teekv::error::Error;
use teekv::supplicant::RpcKind;
use teekv::ta::{stats, KV_TA_UUID, PSEUDO_STATS_UUID};
use teekv::tee::{
    Direction, InstanceState, TaContext, TaDescriptor, TaKind, TaParams, TrustedApp, DEFAULT_TA_MEMORY_LIMIT,
    SESSION_WORLD_SWITCHES,
};
use teekv::{rc, Client, Operation, Parameter, ShmKind, Tee, TeeConfig, Uuid, DEFAULT_DEVICE};

/// Panics on command 1, sleeps on command 2 while checking nobody else is inside.
struct Probe {
    inside: Arc<AtomicBool>,
    overlaps: Arc<AtomicUsize>,
}

impl TrustedApp for Probe {
    fn invoke(&mut self, ctx: &mut TaContext<'_>, _s: u64, cmd: u32, params: &mut TaParams<'_>) -> teekv::Result<()> {
        match cmd {
            0 => Ok(()),
            1 => panic!("probe asked to die"),
            2 => {
                if self.inside.swap(true, Ordering::SeqCst) {
                    self.overlaps.fetch_add(1, Ordering::SeqCst);
                }
                std::thread::sleep(Duration::from_millis(2));
                self.inside.store(false, Ordering::SeqCst);
                Ok(())
            }
            3 => {
                let (n, _) = params.value(0)?;
                let a = ctx.alloc(n as usize)?;
                ctx.free(a);
                Ok(())
            }
            4 => ctx.storage().map(|_| ()),
            _ => Err(Error::BadParameters("unknown".into())),
        }
    }
}

const PROBE: Uuid = Uuid::from_u128(0xfeed);

fn probe_tee(latency: Duration) -> (Arc<Tee>, Arc<AtomicUsize>) {
    let tee = Tee::new(TeeConfig { injected_latency: latency, ..TeeConfig::default() }).unwrap();
    let overlaps = Arc::new(AtomicUsize::new(0));
    let (inside, o) = (Arc::new(AtomicBool::new(false)), Arc::clone(&overlaps));
    tee.supplicant().install_user_ta(
        PROBE,
        64 * 1024,
        Arc::new(move || Box::new(Probe { inside: Arc::clone(&inside), overlaps: Arc::clone(&o) })),
    );
    (tee, overlaps)
}

#[test]
fn panic_kills_instance_and_later_calls_see_target_dead() {
    let (tee, _) = probe_tee(Duration::ZERO);
    let c = Client::new(Arc::clone(&tee));
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let s1 = c.open_session(&ctx, PROBE).unwrap();
    let s2 = c.open_session(&ctx, PROBE).unwrap();
    let err = c.invoke_command(&s1, Operation::new(1, vec![])).unwrap_err();
    assert!(matches!(err, Error::TaPanicked(..)));
    assert_eq!(err.code(), rc::TARGET_DEAD);
    assert!(!c.session_alive(&s1) && !c.session_alive(&s2));
    assert!(matches!(c.invoke_command(&s2, Operation::new(0, vec![])), Err(Error::TargetDead)));
    // a fresh session gets a fresh instance
    let s3 = c.open_session(&ctx, PROBE).unwrap();
    assert_eq!(c.invoke_command(&s3, Operation::new(0, vec![])).unwrap().0, rc::SUCCESS);
    c.close_session(&s1).unwrap();
}

#[test]
fn commands_to_one_instance_are_serialized() {
    let (tee, overlaps) = probe_tee(Duration::ZERO);
    let c = Arc::new(Client::new(tee));
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let threads: Vec<_> = (0..4)
        .map(|_| {
            let (c, ctx) = (Arc::clone(&c), ctx.clone());
            std::thread::spawn(move || {
                let s = c.open_session(&ctx, PROBE).unwrap();
                for _ in 0..10 {
                    c.invoke_command(&s, Operation::new(2, vec![])).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(overlaps.load(Ordering::SeqCst), 0);
}

#[test]
fn injected_latency_applies_per_world_switch() {
    let (tee, _) = probe_tee(Duration::from_micros(200));
    let c = Client::new(Arc::clone(&tee));
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let t = Instant::now();
    let s = c.open_session(&ctx, PROBE).unwrap();
    for _ in 0..20 {
        c.invoke_command(&s, Operation::new(0, vec![])).unwrap();
    }
    c.close_session(&s).unwrap();
    let switches = 20 + SESSION_WORLD_SWITCHES;
    assert_eq!(tee.read_stats().world_switches, switches);
    assert!(t.elapsed() >= Duration::from_micros(200) * switches as u32);
}

#[test]
fn memory_limit_comes_from_the_manifest() {
    let (tee, _) = probe_tee(Duration::ZERO);
    let c = Client::new(tee);
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let s = c.open_session(&ctx, PROBE).unwrap();
    let ok = Operation::new(3, vec![Parameter::value(64 * 1024, 0)]);
    assert_eq!(c.invoke_command(&s, ok).unwrap().0, rc::SUCCESS);
    let over = Operation::new(3, vec![Parameter::value(64 * 1024 + 1, 0)]);
    assert_eq!(c.invoke_command(&s, over).unwrap().0, rc::OUT_OF_MEMORY);
    let _ = DEFAULT_TA_MEMORY_LIMIT;
}

#[test]
fn user_ta_loads_once_through_the_supplicant() {
    let tee = Tee::new(TeeConfig::default()).unwrap();
    let c = Client::new(Arc::clone(&tee));
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    for _ in 0..3 {
        let s = c.open_session(&ctx, KV_TA_UUID).unwrap();
        c.close_session(&s).unwrap();
    }
    assert_eq!(tee.supplicant().rpc_log().count(RpcKind::LoadTa), 1);
    let info = tee.instance_info(&KV_TA_UUID).unwrap();
    assert_eq!(info.state, InstanceState::Created);
    assert_eq!(info.descriptor.memory_limit, DEFAULT_TA_MEMORY_LIMIT);
}

#[test]
fn pseudo_tas_skip_loading_and_cannot_use_storage() {
    let tee = Tee::new(TeeConfig::default()).unwrap();
    let c = Client::new(Arc::clone(&tee));
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let s = c.open_session(&ctx, PSEUDO_STATS_UUID).unwrap();
    assert_eq!(tee.supplicant().rpc_count(), 0, "no LoadTa for a pseudo TA");
    let code = c.invoke_command(&s, Operation::new(stats::CMD_TRY_STORAGE, vec![])).unwrap().0;
    assert_eq!(code, rc::ACCESS_DENIED);

    // boundary counters through the pseudo TA
    let op = Operation::new(stats::CMD_BOUNDARY, vec![Parameter::value(0, 0), Parameter::value(0, 0)]);
    let (_, op) = c.invoke_command(&s, op).unwrap();
    assert_eq!(op.params[0].as_value(), Some((3, 0)), "open + two invokes");

    // duplicate registration
    let dup = tee.register_pseudo_ta(TaDescriptor::pseudo(PSEUDO_STATS_UUID), teekv::ta::stats_factory());
    assert!(matches!(dup, Err(Error::DuplicateUuid(_))));
    assert_eq!(TaDescriptor::pseudo(PSEUDO_STATS_UUID).kind, TaKind::Pseudo);
}

#[test]
fn stats_reports_kv_table_size() {
    let tee = Tee::new(TeeConfig::default()).unwrap();
    let c = Client::new(tee);
    let ctx = c.initialize_context(DEFAULT_DEVICE).unwrap();
    let kv = c.open_session(&ctx, KV_TA_UUID).unwrap();
    let r = c.setup_shared_memory(&ctx, 16, ShmKind::Whole).unwrap();
    for k in 0..5 {
        let op = Operation::new(teekv::kv::CMD_PUT, vec![Parameter::value(k, 0), Parameter::whole(&r, Direction::In)]);
        c.invoke_command(&kv, op).unwrap();
    }
    let st = c.open_session(&ctx, PSEUDO_STATS_UUID).unwrap();
    c.write_shared_memory(&r, 0, KV_TA_UUID.as_bytes()).unwrap();
    let op = Operation::new(
        stats::CMD_TA_INFO,
        vec![Parameter::whole(&r, Direction::In), Parameter::value(0, 0), Parameter::value(0, 0)],
    );
    let (code, op) = c.invoke_command(&st, op).unwrap();
    assert_eq!(code, rc::SUCCESS);
    assert_eq!(op.params[1].as_value(), Some((5 * (16 + 32), 5)));
    assert_eq!(op.params[2].as_value(), Some((stats::STATE_SESSIONS_OPEN, 1)));
}
