use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcellnet::gradcheck::check_full_model;

fn main() {
    let t0 = std::time::Instant::now();
    for seed in 1u64..=6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = check_full_model(&mut rng, false, 6).unwrap();
        println!(
            "seed {seed}: pass={} coords={} skipped={} max_err={:.3e} ratio={:.2}",
            r.passed, r.coords, r.skipped, r.worst_abs_err, r.worst_ratio
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = check_full_model(&mut rng, true, 2).unwrap();
    println!(
        "percep: pass={} coords={} skipped={} max_err={:.3e} ratio={:.2}",
        r.passed, r.coords, r.skipped, r.worst_abs_err, r.worst_ratio
    );
    println!("elapsed {:?}", t0.elapsed());
}
