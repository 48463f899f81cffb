//! Maps dotted key paths to the line that defines them, for diagnostics.
//! Handles the subset of TOML scenario files use: `[table]`, `[[array]]`,
//! `key = value` and dotted keys. Multi-line values anchor at their first line.

use std::collections::BTreeMap;

#[derive(Debug, Default)]
pub struct LineIndex {
    lines: BTreeMap<String, usize>,
}

fn clean_key(k: &str) -> String {
    k.split('.').map(|p| p.trim().trim_matches('"').trim_matches('\'')).collect::<Vec<_>>().join(".")
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

impl LineIndex {
    pub fn new(text: &str) -> Self {
        let mut lines = BTreeMap::new();
        let mut table = String::new();
        let mut arrays: BTreeMap<String, usize> = BTreeMap::new();
        // Brackets opened by a value that spans lines.
        let mut depth = 0i32;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(raw).trim().to_string();
            if depth > 0 {
                depth += bracket_balance(&line);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix("[[").and_then(|l| l.strip_suffix("]]")) {
                let name = clean_key(name);
                let idx = arrays.entry(name.clone()).and_modify(|c| *c += 1).or_insert(0);
                table = format!("{name}[{idx}]");
                lines.entry(table.clone()).or_insert(n);
                lines.entry(name).or_insert(n);
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                table = clean_key(name);
                lines.entry(table.clone()).or_insert(n);
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let key = join(&table, &clean_key(k));
                lines.entry(key).or_insert(n);
                depth = bracket_balance(v).max(0);
            }
        }
        LineIndex { lines }
    }

    /// Line of `key`, or of its nearest enclosing table that is present.
    pub fn line_of(&self, key: &str) -> Option<usize> {
        let mut k = key.to_string();
        loop {
            if let Some(l) = self.lines.get(&k) {
                return Some(*l);
            }
            let cut = k.rfind(['.', '['])?;
            k.truncate(cut);
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str: Option<char> = None;
    for (i, c) in line.char_indices() {
        match (in_str, c) {
            (None, '#') => return &line[..i],
            (None, '"' | '\'') => in_str = Some(c),
            (Some(q), c) if c == q => in_str = None,
            _ => {}
        }
    }
    line
}

fn bracket_balance(s: &str) -> i32 {
    let mut in_str: Option<char> = None;
    let mut d = 0;
    for c in s.chars() {
        match (in_str, c) {
            (None, '"' | '\'') => in_str = Some(c),
            (Some(q), c) if c == q => in_str = None,
            (None, '[' | '{') => d += 1,
            (None, ']' | '}') => d -= 1,
            _ => {}
        }
    }
    d
}

/// 1-based line of a byte offset.
pub fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}
