//! Sanity checks on the timer itself: cost grows linearly with repeated work
//! and per-query cost stays flat as the query count grows.

use std::process::ExitCode;
use std::sync::Arc;

use narravoc::bench::{self, coefficient_of_variation, linear_fit, time_decomposition, BenchOptions, Mode};
use narravoc::embed::{EmbeddingMatrix, VocabMatrices};
use narravoc::index::{retrieve_chain_pooled, ChainOptions, HierIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn index(rng: &mut ChaCha8Rng) -> HierIndex {
    let (scenes, prefixes, postfixes, dim) = (20, 20_000, 8, 64);
    let vocab = Arc::new(bench::synthetic_vocabulary(scenes, prefixes, postfixes).unwrap());
    let m = |rng: &mut ChaCha8Rng, n| EmbeddingMatrix::from_rows(dim, &random_rows(rng, n, dim)).unwrap();
    let matrices = VocabMatrices { scene: m(rng, scenes), prefix: m(rng, prefixes), postfix: m(rng, postfixes) };
    HierIndex::build(vocab, &matrices).unwrap()
}

fn main() -> ExitCode {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let idx = index(&mut rng);
    let opts = BenchOptions { warmup: 20, trials: 5, encode_trials: 1 };
    let chain = ChainOptions { beam: 1, k: 1 };
    let decode = |_: &(), q: &Vec<f32>| {
        std::hint::black_box(retrieve_chain_pooled(&idx, q, chain).unwrap());
    };

    let q = random_rows(&mut rng, 1, 64).remove(0);
    let ks = [200.0, 400.0, 800.0, 1600.0];
    let times: Vec<f64> = ks
        .iter()
        .map(|&k| time_decomposition(Mode::RetrievalHier, 0, || (), &vec![q.clone(); k as usize], decode, &opts).decoding_s)
        .collect();
    let fit = linear_fit(&ks, &times).unwrap();
    let linear = fit.r2 > 0.99;

    let per_query: Vec<f64> = [300, 3000]
        .iter()
        .map(|&n| time_decomposition(Mode::RetrievalHier, 0, || (), &random_rows(&mut rng, n, 64), decode, &opts).per_query_s())
        .collect();
    let cv = coefficient_of_variation(&per_query);
    let flat = cv < 0.2;

    let tag = |ok| if ok { "PASS" } else { "FAIL" };
    println!("{} repeated query: R2 {:.4} over K={ks:?}", tag(linear), fit.r2);
    println!(
        "{} per-query cost: {:.1}us at N=300, {:.1}us at N=3000, cv {cv:.3}",
        tag(flat),
        per_query[0] * 1e6,
        per_query[1] * 1e6
    );
    if linear && flat {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
