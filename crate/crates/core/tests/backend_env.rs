mod common;

use common::{MockServer, Reply};
use icxlt_core::backend::{Backend, GenerationRequest, RemoteBackend, RemoteConfig};

// Alone in its binary: it mutates the process environment.
#[test]
fn env_url_overrides_config() {
    let server = MockServer::start(|_, _| Reply::text("from env"));
    std::env::set_var("ICXLT_BACKEND_URL", &server.url);
    let backend = RemoteBackend::new(RemoteConfig {
        base_url: "http://127.0.0.1:9".into(),
        ..RemoteConfig::default()
    })
    .unwrap();
    std::env::remove_var("ICXLT_BACKEND_URL");
    assert_eq!(backend.config().base_url, server.url);
    assert_eq!(backend.generate(&GenerationRequest::greedy("x", 2)).unwrap(), "from env");
}
