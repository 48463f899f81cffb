use super::*;
use crate::geometry::{place_nodes, PlaneConfig};
use crate::sim::SimConfig;
use crate::substrate::{NodeId, Substrate, SubstrateConfig};

fn world(n: usize, seed: u64) -> World {
    let pts = place_nodes(&PlaneConfig { plane_side: 3500.0, node_count: n, rng_seed: seed }).unwrap();
    let sub = Substrate::bootstrap(SubstrateConfig::default(), &pts, seed).unwrap();
    World::new(sub, ProtocolConfig::default(), SimConfig::default(), seed).unwrap()
}

fn join_many(w: &mut World, ch: ChannelId, members: &[NodeId]) {
    for &m in members {
        let _ = w.join_channel(m, ch);
    }
}

#[test]
fn joins_build_a_sound_tree() {
    let mut w = world(2000, 3);
    let ch = w.register_channel("news", NodeId(0)).unwrap();
    let members: Vec<NodeId> = (1..2000).step_by(9).map(NodeId).collect();
    join_many(&mut w, ch, &members);
    let t = w.now() + 1e6;
    assert!(w.settle(t).unwrap());
    assert_eq!(w.violations(), Vec::<String>::new());
    assert_eq!(w.outcomes().len(), members.len());
    let tree = w.delivery_tree(ch);
    assert!(tree.len() > members.len());
    assert!(tree.is_spanning_tree());
}

#[test]
fn duplicate_channel_names_are_rejected() {
    let mut w = world(300, 1);
    w.register_channel("a", NodeId(0)).unwrap();
    assert_eq!(w.register_channel("a", NodeId(1)), Err(ProtocolError::DuplicateChannel("a".into())));
    assert_eq!(w.register_channel("", NodeId(1)), Err(ProtocolError::EmptyChannelName));
}

fn streaming_world(seed: u64) -> (World, ChannelId) {
    let mut w = world(2000, seed);
    let ch = w.register_channel("live", NodeId(0)).unwrap();
    let members: Vec<NodeId> = (1..2000).step_by(7).map(NodeId).collect();
    join_many(&mut w, ch, &members);
    let t = w.now() + 1e6;
    assert!(w.settle(t).unwrap());
    w.cfg.segment_rate = 1.0 / (0.1 * w.rtt_ref());
    w.start_streaming(ch).unwrap();
    let t = w.now() + 40.0 * w.rtt_ref();
    w.run_until(t).unwrap();
    (w, ch)
}

fn lagging_heads(w: &World, ch: ChannelId, slack: u64) -> Vec<NodeId> {
    let latest = w.latest_seq(ch).unwrap();
    w.heads(ch)
        .into_iter()
        .filter(|h| w.relay_state(ch, *h).and_then(|s| s.highest).is_none_or(|x| x + slack < latest))
        .collect()
}

#[test]
fn stream_reaches_every_relay() {
    let (w, ch) = streaming_world(5);
    assert!(lagging_heads(&w, ch, 40).is_empty(), "{:?}", lagging_heads(&w, ch, 40));
    assert_eq!(w.violations(), Vec::<String>::new());
}

#[test]
fn crashed_relay_is_replaced_and_stream_resumes() {
    let (mut w, ch) = streaming_world(7);
    let victim = w
        .heads(ch)
        .into_iter()
        .find(|h| w.info(*h, ch).is_some_and(|i| i.parent.is_some() && !i.children.is_empty()))
        .expect("an interior relay");
    w.crash(victim).unwrap();
    let t = w.now() + 3.0 * w.member_timeout();
    w.run_until(t).unwrap();
    let r = w.reports().iter().find(|r| r.failed_node == victim).expect("report");
    assert!(r.t_fr().is_some(), "{r:?}");
    assert!(lagging_heads(&w, ch, 40).is_empty());
    assert_eq!(w.violations(), Vec::<String>::new());
}

#[test]
fn departing_relay_hands_over() {
    let (mut w, ch) = streaming_world(9);
    let leaver = w
        .heads(ch)
        .into_iter()
        .find(|h| w.info(*h, ch).is_some_and(|i| i.parent.is_some() && !i.children.is_empty()))
        .expect("an interior relay");
    w.leave_platform(leaver);
    let t = w.now() + 40.0 * w.rtt_ref();
    w.run_until(t).unwrap();
    assert!(!w.sub.node(leaver).member);
    assert!(lagging_heads(&w, ch, 40).is_empty());
    assert_eq!(w.violations(), Vec::<String>::new());
}

#[test]
fn churn_keeps_structure_sound() {
    use crate::sim::{ChurnSchedule, TargetSelector};
    let (mut w, ch) = streaming_world(11);
    w.set_churn_join_prob(0.3);
    let start = w.now();
    let sched = ChurnSchedule {
        join_rate: 0.02,
        leave_rate: 0.02,
        crash_fraction: 0.3,
        crash_list: Vec::new(),
        target_selector: TargetSelector::Random,
        start,
        horizon: start + 20_000.0,
    };
    w.schedule_churn(sched.timeline(4)).unwrap();
    let mut bad = Vec::new();
    let t = start + 20_000.0;
    w.run_until_with(t, |w| {
        let v = w.violations();
        if !v.is_empty() && bad.len() < 5 {
            bad.push((w.now(), v));
        }
    })
    .unwrap();
    let t = w.now() + 1e6;
    let settled = w.settle(t).unwrap();
    assert!(settled, "{:?}", w.quiescence_blockers());
    assert_eq!(w.violations(), Vec::<String>::new());
    assert!(bad.is_empty(), "{bad:?}");
    assert!(lagging_heads(&w, ch, 40).is_empty());
}
