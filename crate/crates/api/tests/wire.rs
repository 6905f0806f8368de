use fedda_api::{ErrorBody, ErrorKind, RunRequest};

#[test]
fn request_defaults_fill_missing_fields() {
    let r: RunRequest = serde_json::from_str("{}").unwrap();
    assert_eq!(r, RunRequest::default());
    let r: RunRequest = serde_json::from_str(r#"{"config":"rounds=2\n","overrides":[["seed","4"]]}"#).unwrap();
    assert_eq!(r, RunRequest::new("rounds=2\n", vec![("seed".into(), "4".into())]));
    let text = serde_json::to_string(&r).unwrap();
    assert!(!text.contains("weights") && !text.contains("site"));
}

#[test]
fn error_kinds_are_snake_case() {
    let e = ErrorBody {
        kind: ErrorKind::Usage,
        message: "unknown key `x`".into(),
    };
    let text = serde_json::to_string(&e).unwrap();
    assert!(text.contains(r#""kind":"usage""#));
    assert_eq!(serde_json::from_str::<ErrorBody>(&text).unwrap(), e);
}
