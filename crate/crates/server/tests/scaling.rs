use poiloc_server::scaling::{run_scaling, ScalingConfig, ScalingError};
use poiloc_server::{ServerConfig, ServerHandle};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn short_run_sustains_offered_rate() {
    let server = ServerHandle::start(ServerConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        ..Default::default()
    })
    .unwrap();
    let cfg = ScalingConfig {
        n_uavs: vec![1, 4],
        duration_s: 3.0,
        ..Default::default()
    };
    let records = run_scaling(&server.base_url(), &cfg).await.unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.records_sent, 30 * r.n_uavs as u64);
        assert_eq!(r.records_processed, r.records_sent, "{r:?}");
        assert!(!r.overload, "{r:?}");
        assert!(r.latency_p99_ms >= r.latency_p50_ms);
        assert_eq!(r.subscribers_dropped, 0);
    }
}

#[tokio::test]
async fn unreachable_server_is_reported() {
    // Bind then drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ScalingConfig {
        n_uavs: vec![1],
        duration_s: 1.0,
        ..Default::default()
    };
    let err = run_scaling(&format!("http://127.0.0.1:{port}"), &cfg).await.unwrap_err();
    assert!(matches!(err, ScalingError::ServerUnavailable(_)), "{err}");
}
