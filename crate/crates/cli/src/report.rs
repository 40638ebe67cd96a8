//! JSON reports and stdout tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const TOOL: &str = "chili";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every report carries the tool version, the model it describes and the
/// configuration that produced it. Keys keep declaration order, maps inside
/// `results` are sorted, and nothing depends on the clock.
#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub model_id: Option<&'a str>,
    pub config: &'a C,
    pub results: R,
}

impl<'a, C: Serialize, R: Serialize> Report<'a, C, R> {
    pub fn new(command: &'a str, model_id: Option<&'a str>, config: &'a C, results: R) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command,
            model_id,
            config,
            results,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports serialize");
        text.push('\n');
        text
    }

    /// Writes `<dir>/<command>.json`.
    pub fn emit(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.json", self.command));
        write_file(&path, self.to_json())?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// A plain two-column table.
pub fn table(title: &str, rows: &[(String, String)]) {
    let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    println!("{title}");
    for (k, v) in rows {
        println!("  {k:<width$}  {v}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Cfg {
        alpha: f64,
    }

    #[test]
    fn round_trips() {
        let cfg = Cfg { alpha: 3.0 };
        let results: BTreeMap<String, f64> = [("b".into(), 0.5), ("a".into(), 1.0)].into();
        let r = Report::new("detect", Some("m"), &cfg, &results);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["config"]["alpha"], 3.0);
        assert_eq!(v["results"]["a"], 1.0);
        assert_eq!(v["model_id"], "m");
        let back: BTreeMap<String, f64> = serde_json::from_value(v["results"].clone()).unwrap();
        assert_eq!(back, results);
    }

    #[test]
    fn empty_results_are_valid_json() {
        let r = Report::new("score", None, &Cfg { alpha: 1.0 }, Vec::<u8>::new());
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["results"], serde_json::json!([]));
        assert!(v["model_id"].is_null());
    }

    #[test]
    fn keys_keep_a_fixed_order() {
        let r = Report::new("x", None, &Cfg { alpha: 1.0 }, 0);
        let text = r.to_json();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("tool") < pos("version") && pos("version") < pos("command"));
        assert!(pos("model_id") < pos("config") && pos("config") < pos("results"));
        assert_eq!(text, r.to_json());
    }
}
