//! Self-check suites: codec round-trips, sparse convolution against a
//! masked dense reference, and finite-difference gradient checks. Each
//! suite reports failing cases with enough detail to replay them.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mask::{decode_mask, encode_mask, gen_synthetic};
use crate::model::{mask_to_image, PropagationScheme, QgnConfig, QgnModel};
use crate::pyramid::{
    build_t_pyramid, decode_quadtree_bytes, encode_quadtree, quadtree_decode, quadtree_encode,
};
use crate::sparse::{
    dense_conv_bwd, dense_conv_fwd, sparse_conv_bwd, sparse_conv_fwd, ConvParams, Site,
    SparseActivation,
};
use crate::train::{level_loss, level_loss_with_grad, total_loss, ClassWeights, LossWeights};

/// One failed check, with a replay key (suite, seed, case index) and an
/// optional serialized artifact.
#[derive(Debug, Clone)]
pub struct FailureCase {
    /// e.g. "codec seed=7 case=42: decoded mask differs"
    pub detail: String,
    /// replayable artifact bytes (QMR1 mask for codec failures)
    pub artifact: Option<Vec<u8>>,
    pub artifact_name: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: u32,
    pub failures: Vec<FailureCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    /// Serialize every failing case under `dir` for replay.
    pub fn write_failures(&self, dir: &Path) -> Result<()> {
        for suite in &self.suites {
            for (i, f) in suite.failures.iter().enumerate() {
                let base = format!("{}-{i}", suite.name);
                std::fs::write(dir.join(format!("{base}.txt")), &f.detail)?;
                if let Some(bytes) = &f.artifact {
                    std::fs::write(dir.join(format!("{base}-{}", f.artifact_name)), bytes)?;
                }
            }
        }
        Ok(())
    }
}

/// Run the three suites on worker threads, each owning its fixtures.
pub fn run_all(seed: u64) -> VerifyReport {
    let codec = std::thread::spawn(move || codec_suite(seed, 200));
    let oracle = std::thread::spawn(move || oracle_suite(seed, 500));
    let grad = std::thread::spawn(move || gradient_suite(seed));
    VerifyReport {
        suites: vec![
            codec.join().expect("codec suite panicked"),
            oracle.join().expect("oracle suite panicked"),
            grad.join().expect("gradient suite panicked"),
        ],
    }
}

/// Quadtree and mask codecs: encode/decode identity on seeded synthetic
/// masks, plus the partition invariant sum(4^l) = W*H on every encode.
pub fn codec_suite(seed: u64, cases: u32) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let levels = rng.gen_range(1..=5u8);
        let side = 1u32 << levels;
        let width = side * rng.gen_range(2..=8u32);
        let height = side * rng.gen_range(2..=8u32);
        let k = rng.gen_range(2..=150u16);
        let shapes = rng.gen_range(0..=12u32);
        let mask = gen_synthetic(width.max(8), height.max(8), k, shapes, seed ^ case as u64);
        let mut fail = |detail: String| {
            failures.push(FailureCase {
                detail: format!("codec seed={seed} case={case}: {detail}"),
                artifact: Some(encode_mask(&mask)),
                artifact_name: "mask.qmr".into(),
            });
        };
        match decode_mask(&encode_mask(&mask)) {
            Ok(back) if back == mask => {}
            Ok(_) => {
                fail("mask codec round-trip differs".into());
                continue;
            }
            Err(e) => {
                fail(format!("mask decode failed: {e}"));
                continue;
            }
        }
        let tp = match build_t_pyramid(&mask, levels) {
            Ok(tp) => tp,
            Err(e) => {
                fail(format!("pyramid build failed: {e}"));
                continue;
            }
        };
        let qt = quadtree_encode(&tp);
        let covered: u128 =
            qt.records.iter().map(|r| 1u128 << (2 * r.level as u32)).sum();
        if covered != (mask.width() as u128) * (mask.height() as u128) {
            fail(format!("partition invariant broken: covered {covered}"));
            continue;
        }
        match decode_quadtree_bytes(&encode_quadtree(&qt)) {
            Ok(back) if back == qt => {}
            _ => {
                fail("quadtree byte codec round-trip differs".into());
                continue;
            }
        }
        match quadtree_decode(&qt, mask.width(), mask.height()) {
            Ok(back) if back == mask => {}
            Ok(_) => fail("quadtree decode differs from original mask".into()),
            Err(e) => fail(format!("quadtree decode failed: {e}")),
        }
    }
    SuiteReport { name: "codec".into(), cases, failures }
}

fn random_instance(
    rng: &mut ChaCha8Rng,
) -> (SparseActivation<f32>, SparseActivation<f32>, ConvParams<f32>) {
    let width = rng.gen_range(3..=12u32);
    let height = rng.gen_range(3..=12u32);
    let c_in = rng.gen_range(1..=4usize);
    let c_out = rng.gen_range(1..=4usize);
    let density: f64 = rng.gen_range(0.0..=1.0);
    let mut sites = BTreeSet::new();
    for y in 0..height {
        for x in 0..width {
            if rng.gen_bool(density) {
                sites.insert((y, x));
            }
        }
    }
    let mut input = SparseActivation::empty(0, width, height, c_in);
    let mut upstream = SparseActivation::empty(0, width, height, c_out);
    for &(y, x) in &sites {
        input
            .sites
            .insert((y, x), (0..c_in).map(|_| rng.gen_range(-1.0..1.0)).collect());
        upstream
            .sites
            .insert((y, x), (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let mut p = ConvParams::zeros(c_out, c_in, 3, 3);
    for w in p.w.iter_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    for b in p.b.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    (input, upstream, p)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Compare one sparse conv forward/backward against the masked dense
/// reference: a dense conv on a zero-filled tensor, read back at the
/// active sites. Returns the worst absolute deviation seen.
pub fn oracle_case(
    input: &SparseActivation<f32>,
    upstream: &SparseActivation<f32>,
    p: &ConvParams<f32>,
    sparse_fwd: &dyn Fn(
        &SparseActivation<f32>,
        &ConvParams<f32>,
    ) -> Result<SparseActivation<f32>>,
) -> Result<f32> {
    let sites: BTreeSet<Site> = input.site_set();
    let mut worst = 0.0f32;

    let sp_out = sparse_fwd(input, p)?;
    let dense_in = input.to_dense();
    let dense_out = dense_conv_fwd(&dense_in, p, 1)?;
    for &(y, x) in &sites {
        worst = worst.max(max_abs_diff(&sp_out.sites[&(y, x)], dense_out.at(y, x)));
    }

    let mut sp_p = p.clone();
    let sp_in_grad = sparse_conv_bwd(input, &mut sp_p, upstream)?;
    let mut d_p = p.clone();
    let dense_up = upstream.to_dense();
    let d_in_grad = dense_conv_bwd(&dense_in, &mut d_p, &dense_up, 1)?;
    for &(y, x) in &sites {
        worst = worst.max(max_abs_diff(&sp_in_grad.sites[&(y, x)], d_in_grad.at(y, x)));
    }
    worst = worst.max(max_abs_diff(&sp_p.gw, &d_p.gw));
    worst = worst.max(max_abs_diff(&sp_p.gb, &d_p.gb));
    Ok(worst)
}

/// Sparse-vs-masked-dense oracle over random instances spanning 0-100%
/// density; forward and backward must agree to 1e-6.
pub fn oracle_suite(seed: u64, cases: u32) -> SuiteReport {
    oracle_suite_with(seed, cases, &|i, p| sparse_conv_fwd(i, p))
}

/// Oracle suite with a pluggable sparse forward, so a deliberately broken
/// implementation can be shown to fail.
pub fn oracle_suite_with(
    seed: u64,
    cases: u32,
    sparse_fwd: &dyn Fn(
        &SparseActivation<f32>,
        &ConvParams<f32>,
    ) -> Result<SparseActivation<f32>>,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let (input, upstream, p) = random_instance(&mut rng);
        match oracle_case(&input, &upstream, &p, sparse_fwd) {
            Ok(worst) if worst <= 1e-6 => {}
            Ok(worst) => failures.push(FailureCase {
                detail: format!(
                    "oracle seed={seed} case={case}: max deviation {worst:e} \
                     ({}x{} c_in={} c_out={} sites={})",
                    input.width, input.height, input.channels, p.c_out, input.len()
                ),
                artifact: None,
                artifact_name: String::new(),
            }),
            Err(e) => failures.push(FailureCase {
                detail: format!("oracle seed={seed} case={case}: {e}"),
                artifact: None,
                artifact_name: String::new(),
            }),
        }
    }
    SuiteReport { name: "oracle".into(), cases, failures }
}

fn dense_from_sparse_f64(
    rng: &mut ChaCha8Rng,
    width: u32,
    height: u32,
    c: usize,
    density: f64,
) -> SparseActivation<f64> {
    let mut out = SparseActivation::empty(0, width, height, c);
    for y in 0..height {
        for x in 0..width {
            if rng.gen_bool(density) {
                out.sites
                    .insert((y, x), (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
        }
    }
    out
}

/// Finite-difference gradient checks: per-operation in f64 (max relative
/// error < 1e-7) and end-to-end through a small model in f32 (< 1e-2).
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = 24u32;

    // Per-op: loss = sum(upstream .* conv(input)) so dLoss/dw has the
    // closed FD form; checked for a handful of weights per instance.
    for case in 0..cases / 2 {
        let width = rng.gen_range(4..=8u32);
        let height = rng.gen_range(4..=8u32);
        let c = rng.gen_range(1..=3usize);
        let input = dense_from_sparse_f64(&mut rng, width, height, c, 0.6);
        if input.is_empty() {
            continue;
        }
        let upstream = {
            let mut u = SparseActivation::empty(0, width, height, c);
            for key in input.sites.keys() {
                u.sites
                    .insert(*key, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            u
        };
        let mut p = ConvParams::<f64>::zeros(c, c, 3, 3);
        for w in p.w.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let loss = |p: &ConvParams<f64>| -> f64 {
            let out = sparse_conv_fwd(&input, p).unwrap();
            out.sites
                .iter()
                .map(|(k, v)| {
                    v.iter().zip(&upstream.sites[k]).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum()
        };
        let mut pg = p.clone();
        sparse_conv_bwd(&input, &mut pg, &upstream).unwrap();
        let h = 1e-6;
        for wi in (0..p.w.len()).step_by(p.w.len().div_ceil(6).max(1)) {
            let orig = p.w[wi];
            p.w[wi] = orig + h;
            let up = loss(&p);
            p.w[wi] = orig - h;
            let down = loss(&p);
            p.w[wi] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = pg.gw[wi];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            if rel >= 1e-7 {
                failures.push(FailureCase {
                    detail: format!(
                        "gradient seed={seed} op-case={case} w[{wi}]: rel err {rel:e}"
                    ),
                    artifact: None,
                    artifact_name: String::new(),
                });
            }
        }
    }

    // End-to-end f32 model gradient vs f64 finite differences.
    let cfg = QgnConfig {
        levels: 2,
        num_classes: 3,
        in_channels: 3,
        encoder_channels: vec![4, 6, 8],
        decoder_channels: vec![4, 4, 6],
        units_per_block: 1,
        seed,
    };
    let mask = gen_synthetic(8, 8, 3, 3, seed);
    let gt = build_t_pyramid(&mask, 2).unwrap();
    let lw = LossWeights::fixed(0.75, 2);
    let cw = ClassWeights::ones(3);

    let mut m32 = QgnModel::<f32>::init(cfg.clone()).unwrap();
    let img32 = mask_to_image::<f32>(&mask);
    let pass = m32.forward(&img32, PropagationScheme::All, Some(&gt)).unwrap();
    let mut grads = Vec::new();
    for l in 0..=2u8 {
        let (_, mut g) =
            level_loss_with_grad(&pass.prediction.logits[l as usize], &gt, l, &cw).unwrap();
        for v in g.sites.values_mut() {
            for cch in v.iter_mut() {
                *cch *= lw.beta()[l as usize] as f32;
            }
        }
        grads.push(Some(g));
    }
    m32.backward(&pass, grads).unwrap();

    let mut m64 = QgnModel::<f64>::init(cfg).unwrap();
    let img64 = mask_to_image::<f64>(&mask);
    let loss64 = |m: &QgnModel<f64>| -> f64 {
        let pass = m.forward(&img64, PropagationScheme::All, Some(&gt)).unwrap();
        let losses: Vec<f64> = (0..=2u8)
            .map(|l| level_loss(&pass.prediction.logits[l as usize], &gt, l, &cw).unwrap())
            .collect();
        total_loss(&losses, &lw).unwrap()
    };
    let n_layers = m64.param_layers().len();
    let h = 1e-6;
    for li in (0..n_layers).step_by(2) {
        let wi = li % m64.param_layers()[li].w.len();
        let g = m32.param_layers()[li].gw[wi] as f64;
        let orig = m64.param_layers()[li].w[wi];
        m64.param_layers_mut()[li].w[wi] = orig + h;
        let up = loss64(&m64);
        m64.param_layers_mut()[li].w[wi] = orig - h;
        let down = loss64(&m64);
        m64.param_layers_mut()[li].w[wi] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
        if rel >= 1e-2 {
            failures.push(FailureCase {
                detail: format!(
                    "gradient seed={seed} end-to-end layer={li} w[{wi}]: rel err {rel:e}"
                ),
                artifact: None,
                artifact_name: String::new(),
            });
        }
    }

    SuiteReport { name: "gradient".into(), cases, failures }
}
