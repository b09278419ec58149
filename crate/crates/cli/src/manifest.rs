//! Flat `key = value` run manifests.

use std::fmt::Write as _;
use std::path::Path;

/// Keys that describe a run rather than configure it.
const INFO_PREFIXES: [&str; 4] = ["tool", "version", "command", "artifact."];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.push("tool", env!("CARGO_PKG_NAME"));
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("command", command);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut m = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("manifest line {}: expected `key = value`", n + 1))?;
            m.push(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Command-line arguments that rerun the recorded command, with `out`
    /// replaced when `out_override` is given.
    pub fn replay_args(&self, out_override: Option<&str>) -> Result<Vec<String>, String> {
        let command = self.get("command").ok_or("manifest has no command")?;
        let mut args = vec![env!("CARGO_BIN_NAME").to_string(), command.to_string()];
        for (k, v) in &self.entries {
            if INFO_PREFIXES
                .iter()
                .any(|p| k == p || (p.ends_with('.') && k.starts_with(p)))
            {
                continue;
            }
            let flag = format!("--{}", k.replace('_', "-"));
            let value = match (k.as_str(), out_override) {
                ("out", Some(o)) => o,
                _ => v.as_str(),
            };
            match value {
                "true" => args.push(flag),
                "false" => {}
                _ => {
                    args.push(flag);
                    args.push(value.to_string());
                }
            }
        }
        Ok(args)
    }
}
