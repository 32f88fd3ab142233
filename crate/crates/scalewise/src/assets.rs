//! Loading engine assets from disk. Anything not given on the command line
//! falls back to the bundled fixture assets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use scalewise_core::belief::validate_knowledge_base;
use scalewise_core::context::context_dimension;
use scalewise_core::extraction::LexiconDocument;
use scalewise_core::scale::validate_scale_definition;
use scalewise_core::{fixtures, Engine, EngineConfig, KnowledgeBase, Lexicon, ScaleDefinition};
use serde::de::DeserializeOwned;

#[derive(Clone, Debug, Default)]
pub struct AssetPaths {
    pub kb: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    let config: EngineConfig = match path {
        Some(p) => read_json(p)?,
        None => EngineConfig::default(),
    };
    config.validate().map_err(|v| anyhow!("invalid config: {}", v.join("; ")))?;
    Ok(config)
}

pub fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase> {
    match path {
        Some(p) => read_json(p),
        None => Ok(fixtures::knowledge_base()),
    }
}

pub fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    let doc: LexiconDocument = match path {
        Some(p) => read_json(p)?,
        None => fixtures::lexicon_document(),
    };
    Lexicon::new(doc).map_err(|v| {
        let lines: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        anyhow!("invalid lexicon: {}", lines.join("; "))
    })
}

/// Every `*.json` file directly inside `dir`, sorted by file name.
fn catalog_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading catalog {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_catalog(dir: Option<&Path>) -> Result<Vec<ScaleDefinition>> {
    let Some(dir) = dir else { return Ok(fixtures::catalog()) };
    let files = catalog_files(dir)?;
    if files.is_empty() {
        bail!("catalog {} contains no scale files", dir.display());
    }
    files.iter().map(|f| read_json(f)).collect()
}

pub fn load_engine(paths: &AssetPaths) -> Result<Engine> {
    let kb = load_kb(paths.kb.as_deref())?;
    let lexicon = load_lexicon(paths.lexicon.as_deref())?;
    let catalog = load_catalog(paths.catalog.as_deref())?;
    let config = load_config(paths.config.as_deref())?;
    Engine::new(kb, lexicon, catalog, config).map_err(|e| anyhow!("{e}"))
}

/// Checks a catalog directory file by file. Each finding is one line,
/// prefixed with the file it concerns. An empty result means valid.
pub fn validate_catalog(dir: &Path, kb: &KnowledgeBase) -> Vec<String> {
    let mut findings = Vec::new();
    if let Err(v) = validate_knowledge_base(kb) {
        findings.extend(v.into_iter().map(|m| format!("knowledge base: {m}")));
        return findings;
    }
    let files = match catalog_files(dir) {
        Ok(f) => f,
        Err(e) => return vec![format!("{}: {e:#}", dir.display())],
    };
    if files.is_empty() {
        findings.push(format!("{}: no scale files", dir.display()));
    }
    let dimension = context_dimension(kb);
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for file in &files {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let def: ScaleDefinition = match read_json(file) {
            Ok(d) => d,
            Err(e) => {
                findings.push(format!("{name}: {:#}", e.root_cause()));
                continue;
            }
        };
        if let Err(v) = validate_scale_definition(&def, Some(dimension)) {
            findings.extend(v.into_iter().map(|m| format!("{name}: {m}")));
        }
        for attr in &def.profile.covered_dimensions {
            if !kb.has_attribute(attr) {
                findings.push(format!("{name}: covered dimension {attr} is not in the knowledge base vocabulary"));
            }
        }
        if let Some(other) = seen.insert(def.scale_id.to_string(), name.clone()) {
            findings.push(format!("{name}: scale id {} already defined in {other}", def.scale_id));
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture_catalog(dir: &Path) {
        for (id, text) in fixtures::CATALOG_JSON {
            fs::write(dir.join(format!("{id}.json")), text).unwrap();
        }
    }

    #[test]
    fn bundled_defaults_load() {
        let engine = load_engine(&AssetPaths::default()).unwrap();
        assert_eq!(engine.catalog().len(), 5);
    }

    #[test]
    fn fixture_catalog_validates_clean() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_catalog(dir.path());
        assert!(validate_catalog(dir.path(), &fixtures::knowledge_base()).is_empty());
        let loaded = load_catalog(Some(dir.path())).unwrap();
        assert_eq!(loaded, fixtures::catalog());
    }

    #[test]
    fn findings_name_their_file() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_catalog(dir.path());
        fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
        fs::write(dir.path().join("zz_copy.json"), fixtures::CATALOG_JSON[0].1).unwrap();
        let mut short: serde_json::Value = serde_json::from_str(fixtures::CATALOG_JSON[1].1).unwrap();
        short["scale_id"] = "short_vector".into();
        short["profile"]["characteristic_vector"] = serde_json::json!([1.0, 0.0]);
        fs::write(dir.path().join("short.json"), short.to_string()).unwrap();
        let findings = validate_catalog(dir.path(), &fixtures::knowledge_base());
        assert!(findings.iter().any(|f| f.starts_with("broken.json:")), "{findings:?}");
        assert!(findings.iter().any(|f| f.starts_with("zz_copy.json:") && f.contains("already defined")), "{findings:?}");
        assert!(findings.iter().any(|f| f.starts_with("short.json:")), "{findings:?}");
    }

    #[test]
    fn bad_config_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{"thresholds":{"tau_min":0.9,"tau_max":0.1}}"#).unwrap();
        let err = load_config(Some(&path)).unwrap_err().to_string();
        assert!(err.contains("invalid config"), "{err}");
        fs::write(&path, r#"{"ewma_lambda":0.5}"#).unwrap();
        assert_eq!(load_config(Some(&path)).unwrap().ewma_lambda, 0.5);
    }
}
