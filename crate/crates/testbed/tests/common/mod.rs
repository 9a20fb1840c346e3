#![allow(dead_code)]

use std::time::Duration;

use qkdchain::harness::{Testbed, TestbedOptions};
use qkdchain::scenario::default_scenario;

pub async fn boot() -> Testbed {
    Testbed::boot(TestbedOptions::in_process(default_scenario())).await.expect("testbed boots")
}

pub async fn boot_with(f: impl FnOnce(&mut TestbedOptions)) -> Testbed {
    let mut opts = TestbedOptions::in_process(default_scenario());
    f(&mut opts);
    Testbed::boot(opts).await.expect("testbed boots")
}

/// Polls `cond` every few milliseconds until it holds or `limit` passes.
pub async fn eventually(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    cond()
}
