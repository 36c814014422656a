//! Random request sequences against the service, checked after every step
//! against the session transition rules.

mod common;

use clicktrack_core::refiners::RefinerKind;
use common::machine::*;
use common::*;
use proptest::prelude::*;
use serde_json::json;

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap()
}

proptest! {
    // 4 cases of 2500 operations: 10^4 requests in total.
    #![proptest_config(ProptestConfig { cases: 4, max_shrink_iters: 200, ..ProptestConfig::default() })]

    #[test]
    fn random_interleavings_never_corrupt_sessions(ops in prop::collection::vec(op(), 2500)) {
        let rt = runtime();
        let app = app_with(RefinerKind::Gcr, FRAMES, 100_000);
        let accepted = rt.block_on(run(&app, &ops));
        prop_assert!(accepted.is_ok(), "{}", accepted.unwrap_err());
        prop_assert!(accepted.unwrap() > 0);
    }
}

#[test]
fn concurrent_requests_to_one_session_are_serialized() {
    let rt = runtime();
    rt.block_on(async {
        let app = app(RefinerKind::Pfr, FRAMES);
        let id = create(&app, "0000").await;
        let futures: Vec<_> = (0..24)
            .map(|i| {
                let (app, id) = (app.clone(), id.clone());
                tokio::spawn(async move {
                    let body = json!({ "frame": 0, "x": 20.0 + i as f64, "y": 30.0 });
                    json(&app, "POST", &format!("/sessions/{id}/correct"), Some(body)).await
                })
            })
            .collect();
        let mut generations = Vec::new();
        for f in futures {
            let (st, v) = f.await.unwrap();
            assert!(st.is_success(), "{v}");
            generations.push(v["generation"].as_u64().unwrap());
        }
        generations.sort();
        generations.dedup();
        assert_eq!(generations.len(), 24);
        let snap = snapshot(&app, &id).await;
        assert_eq!(snap["refinements"].as_array().unwrap().len(), 24);
        check_snapshot(&snap).unwrap();
    });
}
