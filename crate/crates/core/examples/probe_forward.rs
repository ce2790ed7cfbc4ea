//! Temporary probe: raw forward-pass throughput of a 2x50 network.

use hj_sampler::score_net::MlpScoreNetwork;
use std::time::Instant;

fn main() {
    let net = MlpScoreNetwork::new(1, &[50, 50], 3).unwrap();
    let mut out = vec![0.0; 1];
    let mut a = vec![0.0; net.max_width()];
    let mut b = vec![0.0; net.max_width()];
    let reps = 2_000_000u64;
    let t0 = Instant::now();
    let mut acc = 0.0;
    for i in 0..reps {
        let x = [(i % 1000) as f64 * 0.001 - 0.5];
        net.forward_into(&x, 0.5, &mut out, &mut a, &mut b);
        acc += out[0];
    }
    let dt = t0.elapsed();
    println!("forward_into: {:.0} ns/call (acc {acc:.3})", dt.as_nanos() as f64 / reps as f64);

    // tanh throughput
    let t0 = Instant::now();
    let mut s = 0.0f64;
    for i in 0..50_000_000u64 {
        s += ((i % 97) as f64 * 0.01 - 0.3).tanh();
    }
    println!("std tanh: {:.1} ns/call (s {s:.3})", t0.elapsed().as_nanos() as f64 / 5e7);
}
