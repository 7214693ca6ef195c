use margingate::engines::{decode_batched, decode_reference, BatchLayout, DecodeConfig};
use margingate::model::{build_model, ModelSpec};
use margingate::numerics::NumericsProfile;
use margingate::rng::SplitMix64;
use std::time::Instant;

fn main() {
    let w = build_model(&ModelSpec::default_with_seed(42)).unwrap();
    let mut rng = SplitMix64::new(7);
    let prompt: Vec<usize> = (0..24).map(|_| rng.next_below(512) as usize).collect();
    let cfg = DecodeConfig::new(48);

    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        decode_reference(&w, &prompt, &cfg).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let fwd = (prompt.len() + 47) * n;
    println!("reference: {:.1} decodes/s, {:.0} forwards/s", n as f64 / dt, fwd as f64 / dt);

    let profile = NumericsProfile::reduction_order();
    let layout = BatchLayout::replicate(&prompt, 8).unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        decode_batched(&w, &layout, &cfg, &profile).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("batched x8 (memoized): {:.1} runs/s", n as f64 / dt);
}
