use std::path::{Path, PathBuf};

use fedda_core::config::{load_config, parse_assignments, ConfigError, RunConfig, TransportKind, DEFAULT_GRID};
use fedda_core::model::Structure;

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn write(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "# nothing here\n\n");
    assert_eq!(load_config(Some(&p), &[]).unwrap(), RunConfig::default());
    assert_eq!(load_config(None, &[]).unwrap(), RunConfig::default());
    let d = RunConfig::default();
    assert_eq!((d.loss.alpha_att, d.loss.beta_lmmd), (0.01, 100.0));
    assert_eq!(d.sweep_alphas, DEFAULT_GRID.to_vec());
    assert_eq!(d.sites, vec![12, 5, 8]);
}

#[test]
fn file_values_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "alpha_att=0.01\nbeta_lmmd = 100  # the defaults\nrounds=3\nstructure=endo\ntransport=spool\nsite.1.gain=1.5\n",
    );
    let cfg = load_config(Some(&p), &kv(&[("rounds", "7"), ("seed", "42")])).unwrap();
    assert_eq!(cfg.rounds, 7);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.structure, Structure::Endo);
    assert_eq!(cfg.transport, TransportKind::Spool);
    assert_eq!(cfg.shifts[1].gain, 1.5);
    assert_eq!(cfg.fed().rounds, 7);
}

#[test]
fn window_length_bounds() {
    assert_eq!(load_config(None, &kv(&[("gates", "3")])).unwrap().model.gates, 3);
    match load_config(None, &kv(&[("gates", "0")])) {
        Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "gates"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn errors_name_the_key() {
    let err = load_config(None, &kv(&[("alpah_att", "1")])).unwrap_err();
    assert_eq!(err, ConfigError::UnknownKey("alpah_att".into()));
    assert!(err.to_string().contains("alpah_att"));

    match load_config(None, &kv(&[("rounds", "many")])) {
        Err(ConfigError::Value { key, value, .. }) => assert_eq!((key.as_str(), value.as_str()), ("rounds", "many")),
        other => panic!("{other:?}"),
    }
    for (k, v) in [
        ("heads", "3"),
        ("patch_side", "5"),
        ("lr", "0"),
        ("beta_lmmd", "-1"),
        ("target_site", "site-9"),
        ("folds", "1"),
    ] {
        match load_config(None, &kv(&[(k, v)])) {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, k),
            other => panic!("{k}: {other:?}"),
        }
    }
    assert!(matches!(
        parse_assignments("rounds 3\n"),
        Err(ConfigError::Syntax { line: 1, .. })
    ));
    assert!(matches!(
        load_config(Some(Path::new("/definitely/missing.cfg")), &[]),
        Err(ConfigError::Read { .. })
    ));
}

#[test]
fn smallest_target_resolves_to_fewest_subjects() {
    let cfg = RunConfig::default();
    let sizes = vec![
        ("site-0".to_string(), 12),
        ("site-1".to_string(), 5),
        ("site-2".to_string(), 8),
    ];
    assert_eq!(cfg.resolve_target(&sizes).unwrap(), "site-1");
    let fixed = RunConfig {
        target_site: "site-2".into(),
        ..cfg
    };
    assert_eq!(fixed.resolve_target(&sizes).unwrap(), "site-2");
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = load_config(Some(&root.join("desk.cfg")), &[]).unwrap();
    assert_eq!(
        (desk.model.volume_side, desk.model.patch_side, desk.model.blocks),
        (16, 4, 2)
    );
    assert_eq!(desk.rounds, 30);
    for i in 0..3 {
        let c = load_config(Some(&root.join(format!("holdout-site-{i}.cfg"))), &[]).unwrap();
        assert_eq!(c.target_site, format!("site-{i}"));
    }
}
