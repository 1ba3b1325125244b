//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use m2ae_cli::equiv::{random_masks, run_trial, trial_seed};
use m2ae_cli::{bench, flops};
use m2ae_core::conv::{conv2d, unfold3, ConvSpec};
use m2ae_core::deform::{deform_dwconv, DeformDWSpec};
use m2ae_core::image::save_image;
use m2ae_core::ledger::EntryKind;
use m2ae_core::losses::{mask_loss, recon_loss, reblur_loss, tv_loss};
use m2ae_core::mask::gumbel_mask;
use m2ae_core::motion::{
    build_deform_offsets, interpolate_linear, interpolate_quadratic, DisplacementPair, OffsetField, TrajectoryField,
};
use m2ae_core::network::{init_weights, ForwardOptions, Mode, Network, NetworkConfig, StageId};
use m2ae_core::pruned::reparameterize;
use m2ae_core::tensor::norm_rel_diff;
use m2ae_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn pruned_equals_dense() -> Outcome {
    let cfg = NetworkConfig::default();
    let t = Instant::now();
    let (mut out_abs, mut block_rel) = (0.0f32, 0.0f32);
    for k in 0..100 {
        let e = single_thread(|| run_trial(&cfg, 64, 64, trial_seed(1, k))).map_err(|e| e.to_string())?;
        out_abs = out_abs.max(e.output_abs);
        block_rel = block_rel.max(e.block_rel);
    }
    let secs = t.elapsed().as_secs_f64();
    let msg = format!("100 trials at 64x64: output abs {out_abs:e} (≤1e-4), block rel {block_rel:e} (≤1e-5), {secs:.1}s (≤120s)");
    if out_abs <= 1e-4 && block_rel <= 1e-5 && secs <= 120.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flop_fraction_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for k in 0..20 {
        let mut cfg = NetworkConfig { base_width: 8, encoder_blocks: vec![1, 1, 1, 2], ..NetworkConfig::default() };
        if k % 2 == 1 {
            cfg.mask_conv_positions = BTreeSet::from([1, 2, 3]);
        }
        let net = Network::from_store(&init_weights(&cfg, k), &cfg).map_err(|e| e.to_string())?;
        let img = Tensor::from_fn([3, 64, 64], |_| rng.gen_range(0.0..1.0));
        let masks = random_masks(&mut rng, 64, 64);
        let opts = ForwardOptions { mode: Some(Mode::Pruned), mask_override: masks.clone(), ..Default::default() };
        let out = net.forward_with(&img, &opts).map_err(|e| e.to_string())?;
        for e in out.ledger.entries().iter().filter(|e| e.kind == EntryKind::Pruned) {
            let stage: StageId = e.op.split('.').next().unwrap_or("").parse().map_err(|e: m2ae_core::Error| e.to_string())?;
            let m = &masks[&stage];
            let q = m.data().iter().filter(|&&v| v == 1.0).count() as u128;
            let hw = m.len() as u128;
            if e.actual_macs as u128 * hw != e.dense_macs as u128 * q {
                return Err(format!("mask {k}: {} has {}/{} MACs for Q={q} of {hw}", e.op, e.actual_macs, e.dense_macs));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} pruned entries over 20 masks equal Q/(H·W) exactly"))
}

fn dense_flop_magnitude() -> Outcome {
    let r = flops(&NetworkConfig::default(), 2152, 1436, None).map_err(|e| e.to_string())?;
    let t = r.dense_tmacs;
    let msg = format!("{t:.4} T MACs at {}x{} (0.764 T ± 10%)", r.padded[0], r.padded[1]);
    if (t - 0.764).abs() <= 0.0764 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn trajectory_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..1000 {
        let pair = DisplacementPair {
            start: Tensor::from_fn([1, 1, 2], |_| rng.gen_range(-20.0..20.0)),
            end: Tensor::from_fn([1, 1, 2], |_| rng.gen_range(-20.0..20.0)),
        };
        let q = interpolate_quadratic(&pair, 9).map_err(|e| e.to_string())?;
        let l = interpolate_linear(&pair, 9).map_err(|e| e.to_string())?;
        let ok = q.step(0) == pair.start.data()
            && q.step(8) == pair.end.data()
            && q.step(4).iter().all(|&v| v == 0.0)
            && [0, 4, 8].iter().all(|&n| q.step(n) == l.step(n));
        if !ok {
            return Err(format!("pair {k}: endpoints or midpoint not exact"));
        }
    }
    Ok("1000 pairs: exact endpoints, zero midpoint, quadratic = linear at 0, 4, 8".into())
}

fn deform_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..9), rng.gen_range(1..20), rng.gen_range(1..20));
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let wt = rand_tensor(&mut rng, &[c, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[c]);
        let zero = TrajectoryField { steps: 9, offsets: Tensor::zeros([9, h, w, 2]) };
        let d = build_deform_offsets(&zero).map_err(|e| e.to_string())?;
        if d != OffsetField::base_grid(h, w) {
            return Err("zero trajectory is not the base grid".into());
        }
        let got = deform_dwconv(&x, &d, &DeformDWSpec::new(wt.clone(), Some(b.clone())).unwrap()).map_err(|e| e.to_string())?;
        let want = conv2d(&x, &ConvSpec::depthwise3(c, wt, Some(b)).unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max(got.max_abs_diff(&want).unwrap());
    }
    let msg = format!("100 trials: max |deform − depthwise| {worst:e} (≤1e-6)");
    if worst <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reparam_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut dense, mut dw) = (0.0f32, 0.0f32);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        let (cin, cout) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let spec = ConvSpec::dense3(cin, cout, rand_tensor(&mut rng, &[cout, cin, 3, 3]), Some(rand_tensor(&mut rng, &[cout])))
            .unwrap();
        let got = reparameterize(&spec).unwrap().apply_unfolded(&unfold3(&x).unwrap()).unwrap();
        dense = dense.max(norm_rel_diff(&got, &conv2d(&x, &spec).unwrap()).unwrap());

        let c = rng.gen_range(1..17);
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let spec = ConvSpec::depthwise3(c, rand_tensor(&mut rng, &[c, 1, 3, 3]), Some(rand_tensor(&mut rng, &[c]))).unwrap();
        let got = reparameterize(&spec).unwrap().apply_unfolded(&unfold3(&x).unwrap()).unwrap();
        dw = dw.max(norm_rel_diff(&got, &conv2d(&x, &spec).unwrap()).unwrap());
    }
    let msg = format!("100 pairs each: dense rel {dense:e}, depthwise rel {dw:e} (≤1e-5)");
    if dense <= 1e-5 && dw <= 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = Tensor::from_fn([3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let recon = recon_loss(&y, &y, 0.1).map_err(|e| e.to_string())?;
    let zero = TrajectoryField { steps: 9, offsets: Tensor::zeros([9, 32, 32, 2]) };
    let reblur = reblur_loss(&zero, &y, &y).map_err(|e| e.to_string())?;
    let gt = Tensor::from_fn([32, 32], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let scales: Vec<Tensor> = (0..4).map(|l| Tensor::full([32 >> l, 32 >> l], 0.5)).collect();
    let per_scale = mask_loss(&scales, &gt).map_err(|e| e.to_string())? / scales.len() as f64;
    let tv = tv_loss(&Tensor::full([32, 32, 2], 1.25)).map_err(|e| e.to_string())?;
    let ln2_err = (per_scale - std::f64::consts::LN_2).abs();
    let msg = format!("recon {recon:e}, reblur {reblur:e}, mask − ln2 per scale {ln2_err:e} (≤1e-6), tv {tv:e}");
    if recon == 0.0 && reblur == 0.0 && ln2_err <= 1e-6 && tv == 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gumbel_statistics() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, p) in [0.1f32, 0.5, 0.9].into_iter().enumerate() {
        let probs = Tensor::from_fn([100, 100, 2], |i| if i % 2 == 0 { p } else { 1.0 - p });
        let m = gumbel_mask(&probs, 1.0, 80 + k as u64).map_err(|e| e.to_string())?;
        let binary = m.hard.data().iter().all(|&v| v == 0.0 || v == 1.0);
        let rate = m.hard.sum() as f64 / 10_000.0;
        ok &= binary && (rate - p as f64).abs() <= 0.03;
        parts.push(format!("p={p}: {rate:.4}{}", if binary { "" } else { " (non-binary)" }));
    }
    let msg = format!("10000 draws, {} (±0.03)", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn deterministic_runs() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let at = |n: &str| dir.path().join(n);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let img = Tensor::from_fn([3, 64, 64], |i| ((i * 7919) % 1000) as f32 / 999.0);
    save_image(&img, at("in.png")).map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_m2ae");
    let st = Command::new(bin).args(["init-weights", "--seed", "9", "--out", &s(&at("w.bin"))]).output().unwrap();
    if !st.status.success() {
        return Err("init-weights failed".into());
    }
    for k in 0..2 {
        let st = Command::new(bin)
            .args(["--deterministic", "run", "--image", &s(&at("in.png")), "--weights", &s(&at("w.bin")), "--seed", "5"])
            .args(["--threshold", "0.45", "--out", &s(&at(&format!("o{k}.png"))), "--report", &s(&at(&format!("r{k}.json")))])
            .status()
            .unwrap();
        if !st.success() {
            return Err(format!("run {k} failed: {st}"));
        }
    }
    let read = |n: &str| std::fs::read(at(n)).unwrap();
    let (same_img, same_rep) = (read("o0.png") == read("o1.png"), read("r0.json") == read("r1.json"));
    let msg = format!("image identical: {same_img}, report identical: {same_rep}");
    if same_img && same_rep {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn pruned_faster() -> Outcome {
    let cfg = NetworkConfig::default();
    let net = Network::from_store(&init_weights(&cfg, 10), &cfg).map_err(|e| e.to_string())?;
    let r = single_thread(|| bench(&net, 512, 512, 0.1, 3, 10)).map_err(|e| e.to_string())?;
    let msg = format!(
        "512x512, r=0.1, 1 thread: dense median {:.0} ms, pruned median {:.0} ms, speedup {:.3}",
        r.dense_median_ms, r.pruned_median_ms, r.speedup
    );
    if r.pruned_median_ms < r.dense_median_ms {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("pruned equals masked-dense", pruned_equals_dense),
        ("FLOP fraction exactness", flop_fraction_exact),
        ("dense FLOP magnitude", dense_flop_magnitude),
        ("trajectory closed form", trajectory_closed_form),
        ("deformable degeneracy", deform_degeneracy),
        ("reparameterization identity", reparam_identity),
        ("loss identities", loss_identities),
        ("Gumbel sampler statistics", gumbel_statistics),
        ("determinism", deterministic_runs),
        ("pruned faster than dense", pruned_faster),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}: {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
