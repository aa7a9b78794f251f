//! Evaluation machinery: token selection criteria (TSC) and
//! token-count/quality curves, decoder attention maps with mIoU
//! against ground-truth masks, and the linear probe.

use crate::base_tokenizer::{self, BaseConfig, TokenGrid};
use crate::data::ShapeScene;
use crate::distill::{DecodeHead, DistillConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, ParamStore};
use crate::rng::Rng;
use crate::rollout::{self, DecodeSchedule, HaltingPolicy, RolloutOptions, RolloutTrace};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── token selection ─────────────────────────────────────────────────

/// Stopping criterion for adaptive token selection.
pub enum TscCriterion<'a> {
    /// Stop at the first iteration whose pixel reconstruction L1 < τ.
    ReconL1,
    /// Pluggable oracle: per-iteration correctness (e.g. a classifier
    /// judged right/wrong on each iteration's reconstruction); stops at
    /// the first correct iteration, τ is ignored.
    Oracle(&'a [bool]),
}

/// Parse a CLI criterion name.
pub fn parse_criterion(name: &str) -> Result<&'static str> {
    match name {
        "recon-l1" | "oracle" => Ok(if name == "oracle" { "oracle" } else { "recon-l1" }),
        _ => Err(Error::InvalidArgument(format!("unknown TSC criterion `{name}`"))),
    }
}

/// Smallest scheduled token count whose criterion value meets the
/// threshold; falls back to the maximum count in the trace.
pub fn tsc_select(trace: &RolloutTrace, criterion: &TscCriterion, threshold: f32) -> Result<usize> {
    if trace.iterations.is_empty() {
        return Err(Error::InvalidArgument("tsc_select needs a complete trace".into()));
    }
    for (i, it) in trace.iterations.iter().enumerate() {
        let met = match criterion {
            TscCriterion::ReconL1 => {
                let l1 = it.pixel_l1.ok_or_else(|| {
                    Error::InvalidArgument("trace lacks pixel L1 for recon-l1 criterion".into())
                })?;
                l1 < threshold
            }
            TscCriterion::Oracle(correct) => *correct.get(i).unwrap_or(&false),
        };
        if met {
            return Ok(it.token_count);
        }
    }
    Ok(trace.iterations.last().expect("nonempty").token_count)
}

/// One point of the dataset representation curve.
#[derive(Debug, Clone)]
pub struct TscCurvePoint {
    pub threshold: f32,
    /// Cumulative selected tokens / (max tokens · dataset size).
    pub fraction_tokens: f64,
    /// Task-of-interest metric at the selected budgets (mean pixel L1).
    pub toi_value: f64,
}

pub const CURVE_CSV_HEADER: &str = "tsc,threshold,fraction_tokens,toi,toi_value";

/// Sweep thresholds over a dataset: per τ, select each image's budget
/// with the recon-L1 criterion and report the token fraction and the
/// mean reconstruction L1 at those budgets.
pub fn dataset_representation_curve(
    store: &ParamStore,
    base: &BaseConfig,
    cfg: &DistillConfig,
    scenes: &[ShapeScene],
    thresholds: &[f32],
) -> Result<Vec<TscCurvePoint>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("representation curve needs a dataset".into()));
    }
    // one full trace per image, reused across all thresholds
    let traces: Vec<RolloutTrace> = scenes
        .iter()
        .map(|s| {
            let grid = base_tokenizer::encode_image(store, base, &s.image)?;
            rollout::run_rollout(
                store,
                base,
                cfg,
                &grid,
                cfg.iterations,
                HaltingPolicy::Disabled,
                Some(&s.image),
            )
        })
        .collect::<Result<_>>()?;
    let max = cfg.max_tokens() * scenes.len();
    let mut points = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut tokens = 0usize;
        let mut toi = 0.0f64;
        for trace in &traces {
            let count = tsc_select(trace, &TscCriterion::ReconL1, tau)?;
            tokens += count;
            let it = trace
                .iterations
                .iter()
                .find(|it| it.token_count == count)
                .expect("selected count comes from this trace");
            toi += it.pixel_l1.expect("traces carry pixel L1") as f64;
        }
        points.push(TscCurvePoint {
            threshold: tau,
            fraction_tokens: tokens as f64 / max as f64,
            toi_value: toi / scenes.len() as f64,
        });
    }
    Ok(points)
}

pub fn curve_to_csv(points: &[TscCurvePoint]) -> String {
    let mut s = format!("{CURVE_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!(
            "recon_l1,{},{:.6},pixel_l1,{:.6}\n",
            p.threshold, p.fraction_tokens, p.toi_value
        ));
    }
    s
}

// ── attention maps ──────────────────────────────────────────────────

/// Per-latent attention over the 2D grid from one decoder layer.
#[derive(Debug, Clone)]
pub struct AttnMap {
    /// `[m, g·g]`; each row sums to 1.
    pub maps: Tensor,
    pub layer: usize,
    /// Grid side length.
    pub grid: usize,
}

/// Extract decoder attention from mask-token queries to latent keys at
/// the given iteration and decoder layer, averaged over heads and
/// renormalized per latent token over the grid.
pub fn attention_maps(
    store: &ParamStore,
    cfg: &DistillConfig,
    grid: &TokenGrid,
    iteration: usize,
    layer: usize,
) -> Result<AttnMap> {
    if layer >= cfg.dec_depth {
        return Err(Error::IndexOutOfRange { context: "decoder layer", index: layer, limit: cfg.dec_depth });
    }
    let mut tape: Tape<f32> = Tape::new();
    let opts = RolloutOptions {
        iterations: iteration,
        policy: HaltingPolicy::Disabled,
        schedule: DecodeSchedule::FinalOnly,
        head: DecodeHead::TokenLogits,
        beta: 0.25,
        quantize: true,
    };
    let graph = rollout::rollout_on_tape(&mut tape, store, cfg, grid, &opts)?;
    let last = graph.iters.last().expect("iterations >= 1");
    let attn_node = last.decoder_attns[layer];
    let (heads, n, probs) = tape.saved_attention(attn_node).expect("attention node");
    let m = last.slot_ids.len();
    debug_assert_eq!(n, cfg.k_2d + m);
    let mut maps = vec![0.0f32; m * cfg.k_2d];
    for j in 0..m {
        for i in 0..cfg.k_2d {
            let mut w = 0.0f32;
            for h in 0..heads {
                // query i (mask position), key k_2d + j (latent token)
                w += probs[h * n * n + i * n + cfg.k_2d + j];
            }
            maps[j * cfg.k_2d + i] = w / heads as f32;
        }
        let total: f32 = maps[j * cfg.k_2d..(j + 1) * cfg.k_2d].iter().sum();
        if total > 0.0 {
            for v in &mut maps[j * cfg.k_2d..(j + 1) * cfg.k_2d] {
                *v /= total;
            }
        }
    }
    let g = (cfg.k_2d as f64).sqrt() as usize;
    Ok(AttnMap { maps: Tensor::new(vec![m, cfg.k_2d], maps)?, layer, grid: g })
}

/// How "top X%" of an attention map is interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Smallest cell set (descending weight, ties by raster order)
    /// whose cumulative mass reaches X% of the total. Default.
    Mass,
    /// The ⌈n·X/100⌉ highest-weight cells.
    Count,
}

/// Binarize one attention map row by the top-X% rule.
pub fn attn_to_segment(row: &[f32], x_percent: f64, mode: ThresholdMode) -> Result<Vec<bool>> {
    if !(x_percent > 0.0 && x_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("X = {x_percent} outside (0, 100]")));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps raster order among ties
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite weights"));
    let mut mask = vec![false; row.len()];
    match mode {
        ThresholdMode::Mass => {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            let target = total * x_percent / 100.0;
            let mut cum = 0.0f64;
            for &i in &order {
                mask[i] = true;
                cum += row[i] as f64;
                if cum >= target - 1e-12 {
                    break;
                }
            }
        }
        ThresholdMode::Count => {
            let k = ((row.len() as f64 * x_percent / 100.0).ceil() as usize).min(row.len());
            for &i in &order[..k] {
                mask[i] = true;
            }
        }
    }
    Ok(mask)
}

// ── mIoU ────────────────────────────────────────────────────────────

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over ground-truth segments of the best IoU over predicted
/// masks (per-GT max matching; predictions may be reused).
pub fn miou(pred_masks: &[Vec<bool>], gt_masks: &[Vec<bool>]) -> Result<f64> {
    if gt_masks.is_empty() {
        return Err(Error::InvalidArgument("miou needs at least one ground-truth mask".into()));
    }
    let size = gt_masks[0].len();
    for m in pred_masks.iter().chain(gt_masks) {
        if m.len() != size {
            return Err(Error::Dimension(format!("mask size {} != {size}", m.len())));
        }
    }
    let mut sum = 0.0;
    for gt in gt_masks {
        let best = pred_masks.iter().map(|p| iou(p, gt)).fold(0.0f64, f64::max);
        sum += best;
    }
    Ok(sum / gt_masks.len() as f64)
}

/// Downsample a pixel mask to the token grid: a cell is on when at
/// least `min_frac` of its patch pixels are masked.
pub fn mask_to_grid(mask: &[bool], img: usize, patch: usize, min_frac: f64) -> Vec<bool> {
    let g = img / patch;
    let mut out = vec![false; g * g];
    for cy in 0..g {
        for cx in 0..g {
            let mut count = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    if mask[(cy * patch + dy) * img + cx * patch + dx] {
                        count += 1;
                    }
                }
            }
            out[cy * g + cx] = (count as f64) >= min_frac * (patch * patch) as f64;
        }
    }
    out
}

/// Mean mIoU of mass-thresholded attention segments against the scene
/// ground truth at one iteration, over a validation set.
pub fn attention_miou(
    store: &ParamStore,
    base: &BaseConfig,
    cfg: &DistillConfig,
    scenes: &[ShapeScene],
    iteration: usize,
    layer: usize,
    x_percent: f64,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("attention_miou needs a dataset".into()));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for scene in scenes {
        let grid = base_tokenizer::encode_image(store, base, &scene.image)?;
        let am = attention_maps(store, cfg, &grid, iteration, layer)?;
        let preds: Vec<Vec<bool>> = (0..am.maps.rows())
            .map(|j| attn_to_segment(am.maps.row(j), x_percent, ThresholdMode::Mass))
            .collect::<Result<_>>()?;
        let gts: Vec<Vec<bool>> = scene
            .masks
            .iter()
            .map(|m| mask_to_grid(m, base.img, base.patch, 0.5))
            .filter(|g| g.iter().any(|&b| b))
            .collect();
        if gts.is_empty() {
            continue; // every shape fell below a grid cell
        }
        sum += miou(&preds, &gts)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument("no scene had a grid-visible mask".into()));
    }
    Ok(sum / counted as f64)
}

// ── linear probe ────────────────────────────────────────────────────

/// Which encoder outputs are mean-pooled into probe features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolSpec {
    ImageTokens,
    /// All latents, or only the first k when set.
    Latents { first_k: Option<usize> },
    Both { first_k: Option<usize> },
}

fn mean_rows(t: &Tensor) -> Vec<f32> {
    let (n, d) = (t.rows(), t.cols());
    let mut out = vec![0.0f32; d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f32;
    }
    out
}

/// Mean-pooled encoder features for one image at the given iteration.
pub fn extract_features(
    store: &ParamStore,
    base: &BaseConfig,
    cfg: &DistillConfig,
    image: &Tensor,
    iteration: usize,
    pool: PoolSpec,
) -> Result<Vec<f32>> {
    let grid = base_tokenizer::encode_image(store, base, image)?;
    let mut tape: Tape<f32> = Tape::new();
    let opts = RolloutOptions {
        iterations: iteration,
        policy: HaltingPolicy::Disabled,
        schedule: DecodeSchedule::FinalOnly,
        head: DecodeHead::TokenLogits,
        beta: 0.25,
        quantize: true,
    };
    let graph = rollout::rollout_on_tape(&mut tape, store, cfg, &grid, &opts)?;
    let img = tape.to_tensor(graph.final_image_tokens);
    let lat = tape.to_tensor(graph.final_latents);
    let pooled_lat = |first_k: Option<usize>| -> Result<Vec<f32>> {
        let m = lat.rows();
        let k = first_k.unwrap_or(m);
        if k < 1 || k > m {
            return Err(Error::InvalidArgument(format!("first_k {k} outside 1..={m}")));
        }
        let mut rows = Vec::with_capacity(k * lat.cols());
        for i in 0..k {
            rows.extend_from_slice(lat.row(i));
        }
        Ok(mean_rows(&Tensor::new(vec![k, lat.cols()], rows)?))
    };
    match pool {
        PoolSpec::ImageTokens => Ok(mean_rows(&img)),
        PoolSpec::Latents { first_k } => pooled_lat(first_k),
        PoolSpec::Both { first_k } => {
            let mut f = mean_rows(&img);
            f.extend(pooled_lat(first_k)?);
            Ok(f)
        }
    }
}

/// Train a softmax-regression classifier on a train split and report
/// held-out accuracy. Deterministic for a fixed seed.
pub fn linear_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    train_frac: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidArgument("features and labels must align and be nonempty".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least 2 classes".into()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidArgument("label outside class range".into()));
    }
    let n = features.len();
    let d = features[0].len();
    let n_train = ((n as f64 * train_frac) as usize).clamp(1, n - 1);
    let flat: Vec<f32> = features.iter().flat_map(|f| f.iter().copied()).collect();
    let x_train = Tensor::new(vec![n_train, d], flat[..n_train * d].to_vec())?;
    let x_test = Tensor::new(vec![n - n_train, d], flat[n_train * d..].to_vec())?;
    let mut rng = Rng::new(seed);
    let mut w = Tensor::randn(vec![d, classes], 0.01, &mut rng);
    let mut b = Tensor::zeros(vec![classes]);
    let (mut mw, mut vw) = (Tensor::zeros(vec![d, classes]), Tensor::zeros(vec![d, classes]));
    let (mut mb, mut vb) = (Tensor::zeros(vec![classes]), Tensor::zeros(vec![classes]));
    let adam = AdamConfig { lr: 0.05, ..Default::default() };
    for t in 1..=steps {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&x_train, false);
        let wid = tape.leaf(&w, true);
        let bid = tape.leaf(&b, true);
        let h = tape.matmul(x, wid)?;
        let logits = tape.add_row(h, bid)?;
        let loss = tape.cross_entropy_smoothed(logits, &labels[..n_train], 0.0)?;
        tape.backward(loss)?;
        let gw = tape.grad_or_zero(wid);
        let gb = tape.grad_or_zero(bid);
        crate::optim::adam_update(w.data_mut(), &gw, mw.data_mut(), vw.data_mut(), &adam, t as i32)?;
        crate::optim::adam_update(b.data_mut(), &gb, mb.data_mut(), vb.data_mut(), &adam, t as i32)?;
    }
    // held-out accuracy
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(&x_test, false);
    let wid = tape.leaf(&w, false);
    let bid = tape.leaf(&b, false);
    let h = tape.matmul(x, wid)?;
    let logits_id = tape.add_row(h, bid)?;
    let logits = tape.to_tensor(logits_id);
    let mut correct = 0usize;
    for (i, &label) in labels[n_train..].iter().enumerate() {
        let row = logits.row(i);
        let pred = (0..classes).max_by(|&a, &c| row[a].partial_cmp(&row[c]).expect("finite")).expect("classes >= 2");
        correct += (pred == label) as usize;
    }
    Ok(correct as f64 / (n - n_train) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::LatentSequence;
    use crate::rollout::IterationRecord;

    fn fake_trace(l1s: &[f32]) -> RolloutTrace {
        let mut trace = RolloutTrace::default();
        for (i, &l1) in l1s.iter().enumerate() {
            trace.iterations.push(IterationRecord {
                t: i + 1,
                token_count: 8 * (i + 1),
                latents: LatentSequence {
                    tokens: Tensor::zeros(vec![1, 1]),
                    factored: Tensor::zeros(vec![1, 1]),
                    indices: vec![0],
                    slot_ids: vec![0],
                },
                logits: Tensor::zeros(vec![1, 2]),
                token_ce: 0.0,
                pixel_l1: Some(l1),
                halted_count: 0,
                active: vec![true],
            });
        }
        trace
    }

    #[test]
    fn tsc_select_rules() {
        let trace = fake_trace(&[0.3, 0.2, 0.1, 0.05]);
        let c = TscCriterion::ReconL1;
        assert_eq!(tsc_select(&trace, &c, f32::INFINITY).unwrap(), 8);
        assert_eq!(tsc_select(&trace, &c, 0.0).unwrap(), 32); // fallback max
        assert_eq!(tsc_select(&trace, &c, 0.15).unwrap(), 24);
        // monotone: tighter τ never selects fewer tokens
        let mut prev = 0;
        for tau in [0.5f32, 0.25, 0.15, 0.08, 0.01] {
            let sel = tsc_select(&trace, &c, tau).unwrap();
            assert!(sel >= prev, "τ {tau}");
            prev = sel;
        }
        // oracle criterion
        let sel = tsc_select(&trace, &TscCriterion::Oracle(&[false, true, true, true]), 0.0).unwrap();
        assert_eq!(sel, 16);
        assert!(parse_criterion("recon-l1").is_ok());
        assert!(parse_criterion("depth").is_err());
    }

    #[test]
    fn attn_to_segment_rules() {
        let row = [0.5f32, 0.3, 0.1, 0.1];
        let m = attn_to_segment(&row, 60.0, ThresholdMode::Mass).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
        // X = 100 keeps only nonzero-weight cells
        let row = [0.5f32, 0.5, 0.0];
        let m = attn_to_segment(&row, 100.0, ThresholdMode::Mass).unwrap();
        assert_eq!(m, vec![true, true, false]);
        // uniform map at 50% → exactly ⌈n/2⌉ cells
        let row = [0.25f32; 4];
        let m = attn_to_segment(&row, 50.0, ThresholdMode::Mass).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 2);
        let row = [0.2f32; 5];
        let m = attn_to_segment(&row, 50.0, ThresholdMode::Mass).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        // count mode
        let row = [0.5f32, 0.3, 0.1, 0.1];
        let m = attn_to_segment(&row, 50.0, ThresholdMode::Count).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 2);
        assert!(attn_to_segment(&row, 0.0, ThresholdMode::Mass).is_err());
        assert!(attn_to_segment(&row, 101.0, ThresholdMode::Mass).is_err());
    }

    #[test]
    fn attn_to_segment_monotone_in_x() {
        let mut rng = Rng::new(3);
        let row: Vec<f32> = (0..64).map(|_| rng.next_f32()).collect();
        let mut prev: Option<Vec<bool>> = None;
        for x in [10.0, 30.0, 50.0, 80.0, 100.0] {
            let m = attn_to_segment(&row, x, ThresholdMode::Mass).unwrap();
            if let Some(p) = &prev {
                for i in 0..64 {
                    assert!(!p[i] || m[i], "mask(X1) ⊆ mask(X2)");
                }
            }
            prev = Some(m);
        }
    }

    #[test]
    fn miou_rules() {
        let a = vec![true, true, false, false];
        let b = vec![false, false, true, true];
        assert_eq!(miou(&[a.clone()], &[a.clone()]).unwrap(), 1.0);
        assert_eq!(miou(&[a.clone()], &[b.clone()]).unwrap(), 0.0);
        // permutation invariance in predicted mask order
        let preds1 = vec![a.clone(), b.clone()];
        let preds2 = vec![b.clone(), a.clone()];
        let gts = vec![a.clone(), b.clone()];
        assert_eq!(miou(&preds1, &gts).unwrap(), miou(&preds2, &gts).unwrap());
        assert!(miou(&preds1, &[]).is_err());
        assert!(miou(&[vec![true; 3]], &gts).is_err());
    }

    #[test]
    fn miou_matches_exhaustive_oracle() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let preds: Vec<Vec<bool>> =
                (0..4).map(|_| (0..64).map(|_| rng.below(2) == 1).collect()).collect();
            let gts: Vec<Vec<bool>> =
                (0..3).map(|_| (0..64).map(|_| rng.below(2) == 1).collect()).collect();
            let got = miou(&preds, &gts).unwrap();
            // brute force: every (gt, pred) IoU in f64, max per gt
            let mut want = 0.0f64;
            for gt in &gts {
                let mut best = 0.0f64;
                for p in &preds {
                    let inter = gt.iter().zip(p).filter(|(&a, &b)| a && b).count() as f64;
                    let uni = gt.iter().zip(p).filter(|(&a, &b)| a || b).count() as f64;
                    if uni > 0.0 {
                        best = best.max(inter / uni);
                    }
                }
                want += best;
            }
            want /= gts.len() as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_to_grid_downsamples() {
        let mut mask = vec![false; 32 * 32];
        // fill one full 4x4 patch at cell (2, 3)
        for dy in 0..4 {
            for dx in 0..4 {
                mask[(2 * 4 + dy) * 32 + 3 * 4 + dx] = true;
            }
        }
        let g = mask_to_grid(&mask, 32, 4, 0.5);
        assert_eq!(g.iter().filter(|&&b| b).count(), 1);
        assert!(g[2 * 8 + 3]);
    }

    #[test]
    fn probe_chance_level_on_random_features() {
        let mut rng = Rng::new(5);
        let features: Vec<Vec<f32>> =
            (0..400).map(|_| (0..16).map(|_| rng.next_f32()).collect()).collect();
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let acc = linear_probe(&features, &labels, 4, 0.8, 150, 1).unwrap();
        assert!((acc - 0.25).abs() < 0.12, "random features give chance accuracy, got {acc}");
    }

    #[test]
    fn probe_learns_separable_features() {
        let mut rng = Rng::new(6);
        let features: Vec<Vec<f32>> = (0..200)
            .map(|i| {
                let c = i % 4;
                (0..8)
                    .map(|j| if j == c { 1.0 } else { 0.0 } + 0.1 * rng.next_f32())
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let acc = linear_probe(&features, &labels, 4, 0.8, 200, 1).unwrap();
        assert!(acc > 0.95, "separable features, got {acc}");
    }

    #[test]
    fn probe_rejects_degenerate_input() {
        let features = vec![vec![0.0f32; 4]; 10];
        assert!(linear_probe(&features, &[0; 10], 4, 0.8, 10, 1).is_err());
        assert!(linear_probe(&features, &[0, 1], 4, 0.8, 10, 1).is_err());
    }

    #[test]
    fn attention_maps_normalized_and_deterministic() {
        let base = BaseConfig::default();
        let cfg = DistillConfig::from_base(&base);
        let mut rng = Rng::new(31);
        let mut store = ParamStore::new();
        crate::base_tokenizer::init_base(&mut store, &base, &mut rng);
        crate::distill::init_distill(&mut store, &cfg, &mut rng);
        let scene = &crate::data::gen_shapes(1, 3, (2, 2)).unwrap()[0];
        let grid = base_tokenizer::encode_image(&store, &base, &scene.image).unwrap();
        let am = attention_maps(&store, &cfg, &grid, 2, 1).unwrap();
        assert_eq!(am.maps.shape(), &[2 * cfg.atomic, 64]);
        assert_eq!(am.grid, 8);
        for j in 0..am.maps.rows() {
            let s: f32 = am.maps.row(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row {j} sums to {s}");
        }
        let again = attention_maps(&store, &cfg, &grid, 2, 1).unwrap();
        assert_eq!(am.maps, again.maps);
        assert!(attention_maps(&store, &cfg, &grid, 2, cfg.dec_depth).is_err());
    }

    #[test]
    fn first_k_equal_m_matches_all_latent_pooling() {
        let base = BaseConfig::default();
        let cfg = DistillConfig::from_base(&base);
        let mut rng = Rng::new(33);
        let mut store = ParamStore::new();
        crate::base_tokenizer::init_base(&mut store, &base, &mut rng);
        crate::distill::init_distill(&mut store, &cfg, &mut rng);
        let scene = &crate::data::gen_shapes(1, 4, (1, 1)).unwrap()[0];
        let t = 2;
        let m = cfg.atomic * t;
        let all = extract_features(&store, &base, &cfg, &scene.image, t, PoolSpec::Latents { first_k: None }).unwrap();
        let k_m = extract_features(&store, &base, &cfg, &scene.image, t, PoolSpec::Latents { first_k: Some(m) }).unwrap();
        assert_eq!(all, k_m);
        let both = extract_features(&store, &base, &cfg, &scene.image, t, PoolSpec::Both { first_k: None }).unwrap();
        assert_eq!(both.len(), 2 * cfg.d_model);
    }
}
