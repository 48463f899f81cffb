use std::collections::BTreeSet;

use super::locate::{line_at, LineIndex};
use super::{Diagnostic, Report, Scenario};
use crate::experiments::ExperimentKind;

struct Collector<'a> {
    index: &'a LineIndex,
    out: Vec<Diagnostic>,
}

impl Collector<'_> {
    fn push(&mut self, key: impl Into<String>, message: impl Into<String>) {
        let key = key.into();
        self.out.push(Diagnostic { line: self.index.line_of(&key), key, message: message.into() });
    }
}

/// Key named by the first word of a message such as `b must be ...`.
fn leading_key(msg: &str) -> &str {
    msg.split([' ', '(']).next().unwrap_or("")
}

fn walk_unknown(raw: &toml::Value, known: &toml::Value, path: &str, c: &mut Collector) {
    match (raw, known) {
        (toml::Value::Table(r), toml::Value::Table(k)) => {
            for (key, v) in r {
                let p = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match k.get(key) {
                    Some(kv) => walk_unknown(v, kv, &p, c),
                    None => c.push(p, "unknown key"),
                }
            }
        }
        (toml::Value::Array(r), toml::Value::Array(k)) => {
            for (i, v) in r.iter().enumerate() {
                if let Some(kv) = k.get(i).or_else(|| k.first()) {
                    walk_unknown(v, kv, &format!("{path}[{i}]"), c);
                }
            }
        }
        _ => {}
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn check(sc: &Scenario, c: &mut Collector) {
    if sc.name.trim().is_empty() || sc.name.contains(['/', '\\']) {
        c.push("name", "must be non-empty and free of path separators");
    }
    if sc.experiments.is_empty() {
        c.push("experiments", "experiment list must not be empty");
    }
    let mut seen = BTreeSet::new();
    for e in &sc.experiments {
        if !seen.insert(*e) {
            c.push("experiments", format!("{} is listed twice", e.as_str()));
        }
    }
    if sc.seeds.is_empty() {
        c.push("seeds", "must list at least one seed");
    }
    let uniq: BTreeSet<u64> = sc.seeds.iter().copied().collect();
    if uniq.len() != sc.seeds.len() {
        c.push("seeds", "seeds must be distinct");
    }
    if !positive(sc.horizon_s) {
        c.push("horizon_s", format!("must be positive, got {}", sc.horizon_s));
    }

    let nodes = sc.plane.node_count;
    if nodes == 0 {
        c.push("plane.node_count", "must be at least 1");
    }
    if !positive(sc.plane.plane_side) {
        c.push("plane.plane_side", format!("must be positive and finite, got {}", sc.plane.plane_side));
    }
    for m in sc.substrate.violations() {
        c.push(format!("substrate.{}", leading_key(&m)), m);
    }
    for m in sc.protocol.violations() {
        c.push(leading_key(&m).to_string(), m);
    }
    for m in sc.sim.violations() {
        c.push(format!("sim.{}", leading_key(&m)), m);
    }

    let mut names = BTreeSet::new();
    for (i, ch) in sc.channels.iter().enumerate() {
        let key = format!("channels[{i}]");
        if !names.insert(ch.name.as_str()) {
            c.push(format!("{key}.name"), format!("channel name {:?} is used twice", ch.name));
        }
        let source = ch.source.parse::<crate::experiments::SourceSel>();
        let members = ch.members.parse::<crate::experiments::MemberSel>();
        if let Err(e) = &source {
            c.push(format!("{key}.source"), e.clone());
        }
        if let Err(e) = &members {
            c.push(format!("{key}.members"), e.clone());
        }
        // A selector that failed to parse is replaced by one that is always valid,
        // so the other one is still checked.
        {
            let plan = crate::experiments::ChannelPlan {
                name: ch.name.clone(),
                source: source.unwrap_or(crate::experiments::SourceSel::Random),
                members: members.unwrap_or(crate::experiments::MemberSel::Random(0)),
                join: ch.join,
            };
            for v in plan.violations(nodes) {
                let field = if v.starts_with("source") {
                    "source"
                } else if v.starts_with("channel name") {
                    "name"
                } else {
                    "members"
                };
                c.push(format!("{key}.{field}"), v);
            }
        }
    }

    let wants = |k: ExperimentKind| sc.experiments.contains(&k);
    if wants(ExperimentKind::Fig2Convergence) {
        let f = &sc.fig2;
        for (k, v) in [("sources", f.sources), ("pairs_per_source", f.pairs_per_source), ("bins", f.bins)] {
            if v == 0 {
                c.push(format!("fig2.{k}"), "must be at least 1");
            }
        }
        if nodes < 3 {
            c.push("plane.node_count", "convergence needs at least 3 nodes");
        }
    }
    if wants(ExperimentKind::Fig3Stretch) || wants(ExperimentKind::Fig4Netload) || wants(ExperimentKind::Fig5StableVsNone) {
        if sc.trees.group_sizes.is_empty() {
            c.push("trees.group_sizes", "must list at least one group size");
        }
        for g in &sc.trees.group_sizes {
            if *g == 0 || *g >= nodes {
                c.push("trees.group_sizes", format!("group size {g} must be within 1..{nodes}"));
            }
        }
    }
    if wants(ExperimentKind::StartupDelay) {
        let s = &sc.startup;
        if s.channels == 0 || s.channels >= nodes {
            c.push("startup.channels", format!("must be within 1..{nodes}"));
        }
        if s.joins == 0 {
            c.push("startup.joins", "must be at least 1");
        }
    }
    let uses_plans = wants(ExperimentKind::RecoveryTiming) || wants(ExperimentKind::ChurnInvariants);
    if wants(ExperimentKind::RecoveryTiming) {
        let r = &sc.recovery;
        if !positive(r.segment_interval_rtts) {
            c.push("recovery.segment_interval_rtts", "must be positive");
        }
        if sc.channels.is_empty() && (r.channels == 0 || r.members_per_channel + r.channels > nodes) {
            c.push("recovery.channels", format!("{} channels of {} members do not fit in {nodes} nodes", r.channels, r.members_per_channel));
        }
    }
    if wants(ExperimentKind::ChurnInvariants) {
        let ch = &sc.churn;
        for (k, v) in [("joins_per_s", ch.joins_per_s), ("leaves_per_s", ch.leaves_per_s)] {
            if !(v.is_finite() && v >= 0.0) {
                c.push(format!("churn.{k}"), format!("must be a non-negative number, got {v}"));
            }
        }
        for (k, v) in [("crash_fraction", ch.crash_fraction), ("arrival_join_prob", ch.arrival_join_prob)] {
            if !(0.0..=1.0).contains(&v) {
                c.push(format!("churn.{k}"), format!("must be within [0, 1], got {v}"));
            }
        }
        if !positive(ch.segment_interval_s) {
            c.push("churn.segment_interval_s", "must be positive");
        }
        if !positive(ch.checkpoint_s) || ch.checkpoint_s > sc.horizon_s {
            c.push("churn.checkpoint_s", format!("must be positive and at most horizon_s ({})", sc.horizon_s));
        }
        if sc.channels.is_empty() && (ch.channels == 0 || ch.members_per_channel + ch.channels > nodes) {
            c.push("churn.channels", format!("{} channels of {} members do not fit in {nodes} nodes", ch.channels, ch.members_per_channel));
        }
    }
    if !sc.channels.is_empty() && !uses_plans {
        c.push("channels", "channels are only used by recovery_timing and churn_invariants");
    }
}

/// Parses and checks a scenario. Every problem found is reported; the
/// scenario is returned whenever it parsed, even with violations.
pub fn validate_text(text: &str, file: &str) -> (Option<Scenario>, Report) {
    let index = LineIndex::new(text);
    let mut c = Collector { index: &index, out: Vec::new() };
    let mut report = Report { file: file.to_string(), diagnostics: Vec::new() };
    let raw: toml::Value = match toml::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            let line = e.span().map(|s| line_at(text, s.start));
            report.diagnostics.push(Diagnostic { line, key: String::new(), message: e.message().to_string() });
            return (None, report);
        }
    };
    let sc: Scenario = match toml::from_str(text) {
        Ok(s) => s,
        Err(e) => {
            let line = e.span().map(|s| line_at(text, s.start));
            report.diagnostics.push(Diagnostic { line, key: String::new(), message: e.message().to_string() });
            return (None, report);
        }
    };
    if let Ok(known) = toml::Value::try_from(&sc) {
        walk_unknown(&raw, &known, "", &mut c);
    }
    check(&sc, &mut c);
    c.out.sort_by(|a, b| a.line.cmp(&b.line).then_with(|| a.key.cmp(&b.key)).then_with(|| a.message.cmp(&b.message)));
    report.diagnostics = c.out;
    (Some(sc), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "name = \"t\"\nseeds = [1]\nexperiments = [\"fig2_convergence\"]\n";

    fn diags(text: &str) -> Vec<Diagnostic> {
        validate_text(text, "t.toml").1.diagnostics
    }

    #[test]
    fn minimal_scenario_is_clean() {
        assert_eq!(diags(MINIMAL), vec![]);
    }

    #[test]
    fn reference_config_is_clean() {
        let (sc, r) = validate_text(super::super::REFERENCE, "reference.toml");
        assert!(r.is_clean(), "{r}");
        assert!(!sc.unwrap().experiments.is_empty());
    }

    #[test]
    fn empty_experiment_list_is_rejected() {
        let d = diags("name = \"t\"\nseeds = [1]\nexperiments = []\n");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].line, Some(3));
        assert_eq!(d[0].key, "experiments");
    }

    #[test]
    fn clique_bounds_violate_the_doubling_rule() {
        let d = diags(&format!("{MINIMAL}[substrate]\nclique_min = 64\nclique_max = 100\n"));
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].key, "substrate.clique_max");
        assert_eq!(d[0].line, Some(6));
    }

    #[test]
    fn b_out_of_range_is_reported() {
        let d = diags(&format!("{MINIMAL}[substrate]\nb = 0\n"));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].key, "substrate.b");
        assert_eq!(d[0].line, Some(5));
    }

    #[test]
    fn all_violations_are_listed() {
        let text = format!(
            "{MINIMAL}horizon_s = -1\n[substrate]\nb = 0\nclique_min = 64\nclique_max = 100\nbogus = 1\n[[channels]]\nname = \"a\"\nsource = \"node:999999\"\nmembers = \"random:x\"\n"
        );
        let d = diags(&text);
        let keys: Vec<&str> = d.iter().map(|x| x.key.as_str()).collect();
        for k in ["horizon_s", "substrate.b", "substrate.clique_max", "substrate.bogus", "channels[0].source", "channels[0].members", "channels"] {
            assert!(keys.contains(&k), "{k} missing from {keys:?}");
        }
        assert!(d.iter().all(|x| x.line.is_some()));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let d = diags("name = \"t\"\nseeds = [1\nexperiments = []\n");
        assert_eq!(d.len(), 1);
        assert!(d[0].line.is_some());
        let d = diags("name = \"t\"\nseeds = [1]\nexperiments = [\"fig9\"]\n");
        assert_eq!(d[0].line, Some(3), "{d:?}");
    }
}
