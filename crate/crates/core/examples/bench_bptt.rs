use std::time::Instant;
fn main() {
    use srddl::predictor::*;
    use ndarray::Array1;
    let cfg = NetConfig::standard(4, 3);
    let params = PredictorParams::init(cfg, 0, 1.0);
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let track = ndarray::Array2::from_shape_fn((30, 4), |_| rng.random::<f64>() * 4.0);
    let scores = srddl::io::ScoreVector { subject_id: "s".into(), y: Array1::from_vec(vec![1.0, 2.0, 0.5]), observed: vec![true, true, true] };
    let n = 2000;
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        let (l, _, _) = backward(&params, &track, &scores).unwrap();
        acc += l;
    }
    println!("fwd+bwd: {:.3} ms each (sum {acc:.3e})", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
    let t0 = Instant::now();
    for _ in 0..n {
        let tr = forward(&params, &track).unwrap();
        acc += tr.final_pred[0];
    }
    println!("fwd only: {:.3} ms each (sum {acc:.3e})", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
    let cfgw = NetConfig::wide(30, 3);
    let pw = PredictorParams::init(cfgw, 0, 1.0);
    let trackw = ndarray::Array2::from_shape_fn((30, 30), |_| rng.random::<f64>());
    let t0 = Instant::now();
    for _ in 0..100 {
        let _ = backward(&pw, &trackw, &scores).unwrap();
    }
    println!("wide fwd+bwd: {:.3} ms each", t0.elapsed().as_secs_f64() / 100.0 * 1e3);
}
