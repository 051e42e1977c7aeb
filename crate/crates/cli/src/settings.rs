//! Turning a config document, flag overrides and the environment into a
//! resolved run config.

use std::path::Path;

use varscale_core::config::TrainConfig;

use crate::error::{CliError, CliResult};

pub const SEED_VAR: &str = "VARSCALE_SEED";

/// Pairs `--key=value` and `--key value` tokens. Dashes in keys become
/// underscores, so `--scaling.mu-init` and `--scaling.mu_init` agree.
pub fn parse_overrides(tokens: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let body = tok
            .strip_prefix("--")
            .ok_or_else(|| CliError::usage(format!("unexpected argument `{tok}`; overrides look like --key=value")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::usage(format!("`--{body}` needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(CliError::usage(format!("malformed override `{tok}`")));
        }
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Removes a command's own flag from the parsed overrides. Flags written
/// after the first override land in the override list, so they are merged
/// back here; giving one twice is an error.
pub fn take_flag(overrides: &mut Vec<(String, String)>, name: &str, parsed: Option<String>) -> CliResult<Option<String>> {
    let mut found = parsed;
    let mut i = 0;
    while i < overrides.len() {
        if overrides[i].0 == name {
            let (_, v) = overrides.remove(i);
            if found.replace(v).is_some() {
                return Err(CliError::usage(format!("--{} given more than once", name.replace('_', "-"))));
            }
        } else {
            i += 1;
        }
    }
    Ok(found)
}

pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_VAR} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

/// Applies overrides to `text` and resolves defaults. The seed comes from the
/// document or a `--seed` override, then `VARSCALE_SEED`, then 0.
pub fn resolve_config(text: &str, overrides: &[(String, String)]) -> CliResult<TrainConfig> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::usage(format!("config error: {}", e.message())))?;
    let mut all = overrides.to_vec();
    let has_seed = table.contains_key("seed") || overrides.iter().any(|(k, _)| k == "seed");
    if !has_seed {
        if let Some(seed) = env_seed()? {
            all.push(("seed".into(), seed.to_string()));
        }
    }
    Ok(TrainConfig::from_toml_with_overrides(text, &all)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn both_override_spellings() {
        let o = parse_overrides(&toks(&["--method", "svs", "--scaling.mu-init=10", "--seed=3"])).unwrap();
        assert_eq!(
            o,
            vec![
                ("method".into(), "svs".into()),
                ("scaling.mu_init".into(), "10".into()),
                ("seed".into(), "3".into())
            ]
        );
    }

    #[test]
    fn stray_tokens_are_usage_errors() {
        assert!(matches!(parse_overrides(&toks(&["svs"])), Err(CliError::Usage(_))));
        assert!(matches!(parse_overrides(&toks(&["--method"])), Err(CliError::Usage(_))));
        assert!(matches!(parse_overrides(&toks(&["--=1"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_method_names_the_field() {
        match resolve_config("seed = 1\n", &[]) {
            Err(CliError::Usage(m)) => assert!(m.contains("method"), "{m}"),
            other => panic!("expected a usage error, got {other:?}"),
        }
    }

    #[test]
    fn own_flags_are_taken_back() {
        let mut o = parse_overrides(&toks(&["--method", "pn", "--out", "d", "--seed=1"])).unwrap();
        assert_eq!(take_flag(&mut o, "out", None).unwrap().as_deref(), Some("d"));
        assert_eq!(o.len(), 2);
        let mut o = parse_overrides(&toks(&["--out=d"])).unwrap();
        assert!(take_flag(&mut o, "out", Some("e".into())).is_err());
    }

    #[test]
    fn explicit_seed_wins() {
        let c = resolve_config("method = \"pn\"\nseed = 5\n", &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(c.seed, 9);
    }
}
