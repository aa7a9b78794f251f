// Temporary diagnostic: does stage-1 learn when the quantizer is
// bypassed (continuous factored latents straight to the decoder)?
use alit::base_tokenizer;
use alit::distill::{self, DecodeHead};
use alit::rng::Rng;
use alit::tape::{Tape, TensorId};
use alit::training::*;

fn mean_cos(rows: &[Vec<f32>]) -> f64 {
    let n = rows.len();
    let (mut s, mut c) = (0.0f64, 0u64);
    for i in (0..n).step_by(3) {
        for j in (i + 1..n).step_by(5) {
            let (mut d, mut na, mut nb) = (0.0f32, 0.0f32, 0.0f32);
            for k in 0..rows[i].len() {
                d += rows[i][k] * rows[j][k];
                na += rows[i][k] * rows[i][k];
                nb += rows[j][k] * rows[j][k];
            }
            s += (d / (na.sqrt() * nb.sqrt()).max(1e-9)) as f64;
            c += 1;
        }
    }
    s / c as f64
}

/// CE at T=8 decoding `src`'s latents against arbitrary `targets`:
/// comparing self vs cross targets measures how much the decoder
/// actually reads out of the latents.
fn ce_t8(
    store: &alit::optim::ParamStore,
    dist: &alit::distill::DistillConfig,
    src: &alit::base_tokenizer::TokenGrid,
    targets: &[usize],
) -> f32 {
    let mut tape: Tape<f32> = Tape::new();
    let img_raw = tape.leaf(&src.embeddings, false);
    let all: Vec<usize> = (0..dist.k_2d).collect();
    let mut carried: Option<TensorId> = None;
    let mut slot_ids: Vec<usize> = Vec::new();
    let mut out = 0.0;
    for t in 1..=dist.iterations {
        let fresh_slots: Vec<usize> = ((t - 1) * dist.atomic..t * dist.atomic).collect();
        let fresh = distill::init_latents(&mut tape, store, dist, &fresh_slots).unwrap();
        let latents = match carried {
            Some(prev) => tape.concat_rows(prev, fresh).unwrap(),
            None => fresh,
        };
        slot_ids.extend_from_slice(&fresh_slots);
        let latents = distill::add_latent_positions(&mut tape, store, latents, &slot_ids).unwrap();
        let img = distill::embed_image_tokens(&mut tape, store, img_raw, &all).unwrap();
        let (_, lat_out) = distill::distill_encode(&mut tape, store, dist, Some(img), latents).unwrap();
        if t == dist.iterations {
            let f = distill::factorize(&mut tape, store, lat_out).unwrap();
            let d = distill::defactorize(&mut tape, store, f).unwrap();
            let (logits, _) =
                distill::distill_decode(&mut tape, store, dist, d, &slot_ids, DecodeHead::TokenLogits)
                    .unwrap();
            let ce = tape.cross_entropy_smoothed(logits, targets, 0.1).unwrap();
            out = tape.scalar_value(ce);
        }
        carried = Some(lat_out);
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(800);
    let (mut store, mut cfg) =
        load_checkpoint(std::path::Path::new("target/pretrain/base.ckpt")).unwrap();
    cfg.lr = lr;
    if std::env::var("ALIGN").is_ok() {
        // alignment init: latent slot positions = 2D grid positions,
        // W_k = W_q so attention starts diagonal-seeking
        let p2 = store.get("distill.pos2d").clone();
        let p1 = store.get_mut("distill.pos1d");
        let n = p1.rows().min(p2.rows()) * p2.cols();
        p1.data_mut()[..n].copy_from_slice(&p2.data()[..n]);
        for pfx in ["distill.enc", "distill.dec"] {
            for i in 0..2 {
                let wq = store.get(&format!("{pfx}.blk{i}.wq.w")).clone();
                *store.get_mut(&format!("{pfx}.blk{i}.wk.w")) = wq;
            }
        }
    }
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let scenes = load_scenes(&cfg).unwrap();
    let mut rng = Rng::new(12345);
    if std::env::var("WARM").is_ok() {
        // warm-start the distillation stack from the trained base tokenizer
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("base.enc.") || n.starts_with("base.dec."))
            .map(|s| s.to_string())
            .collect();
        for n in names {
            let v = store.get(&n).clone();
            let d = n.replace("base.", "distill.");
            *store.get_mut(&d) = v;
        }
        let cb = store.get("base.codebook").clone();
        let (k, dd) = (cb.rows(), cb.cols());
        let mut ht = vec![0.0f32; dd * k];
        for r in 0..k {
            for c in 0..dd {
                ht[c * k + r] = cb.data()[r * dd + c];
            }
        }
        *store.get_mut("distill.head.w") =
            alit::tensor::Tensor::new(vec![dd, k], ht).unwrap();
        let pos = store.get("base.pos").clone();
        *store.get_mut("distill.pos2d") = pos.clone();
        *store.get_mut("distill.posmask") = pos;
    }
    if std::env::var("XAVIER").is_ok() {
        // redraw distillation linear weights at sigma = 1/sqrt(d_in)
        let mut r2 = Rng::new(777);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("distill.") && n.ends_with(".w"))
            .map(|s| s.to_string())
            .collect();
        for n in names {
            let shape = store.get(&n).shape().to_vec();
            let sigma = 1.0 / (shape[0] as f32).sqrt();
            *store.get_mut(&n) = alit::tensor::Tensor::randn(shape, sigma, &mut r2);
        }
    }
    let aux = std::env::var("AUX").is_ok();
    if aux {
        alit::nn::init_linear(&mut store, "distill.aux", cfg.d_2d, cfg.k_base, &mut rng);
    }
    store.set_all_trainable(true);
    store.set_trainable_prefix("base.", false);
    let adam = cfg.adam();
    let grids: Vec<_> = scenes
        .iter()
        .map(|s| base_tokenizer::encode_image(&store, &base, &s.image).unwrap())
        .collect();
    let all_positions: Vec<usize> = (0..dist.k_2d).collect();
    for step in 0..=steps {
        store.zero_grads();
        let mut ce_last = 0.0f64;
        let mut aux_last = 0.0f64;
        let mut fact_rows: Vec<Vec<f32>> = Vec::new();
        let overfit: usize = std::env::var("OVERFIT")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        for _ in 0..cfg.batch {
            let grid = if overfit > 0 {
                &grids[rng.below(overfit)]
            } else {
                &grids[rng.below(grids.len())]
            };
            let mut tape: Tape<f32> = Tape::new();
            let img_raw = tape.leaf(&grid.embeddings, false);
            let mut carried: Option<TensorId> = None;
            let mut slot_ids: Vec<usize> = Vec::new();
            let mut ces: Vec<TensorId> = Vec::new();
            for t in 1..=dist.iterations {
                let fresh_slots: Vec<usize> = ((t - 1) * dist.atomic..t * dist.atomic).collect();
                let fresh = distill::init_latents(&mut tape, &store, &dist, &fresh_slots).unwrap();
                let latents = match carried {
                    Some(prev) => tape.concat_rows(prev, fresh).unwrap(),
                    None => fresh,
                };
                slot_ids.extend_from_slice(&fresh_slots);
                let latents =
                    distill::add_latent_positions(&mut tape, &store, latents, &slot_ids).unwrap();
                let img =
                    distill::embed_image_tokens(&mut tape, &store, img_raw, &all_positions).unwrap();
                let (_, lat_out) =
                    distill::distill_encode(&mut tape, &store, &dist, Some(img), latents).unwrap();
                let f = distill::factorize(&mut tape, &store, lat_out).unwrap();
                let d = distill::defactorize(&mut tape, &store, f).unwrap();
                let (logits, _) = distill::distill_decode(
                    &mut tape, &store, &dist, d, &slot_ids, DecodeHead::TokenLogits,
                )
                .unwrap();
                let ce = tape.cross_entropy_smoothed(logits, &grid.indices, 0.1).unwrap();
                ces.push(ce);
                if aux {
                    let al = alit::nn::linear(&mut tape, &store, "distill.aux", d).unwrap();
                    let targets: Vec<usize> =
                        slot_ids.iter().map(|&s| grid.indices[s]).collect();
                    let ace = tape.cross_entropy_smoothed(al, &targets, 0.1).unwrap();
                    ces.push(ace);
                    if t == dist.iterations {
                        aux_last += tape.scalar_value(ace) as f64;
                    }
                }
                carried = Some(lat_out);
                if t == dist.iterations {
                    ce_last += tape.scalar_value(ce) as f64;
                    let ft = tape.to_tensor(f);
                    for r in 0..ft.rows() {
                        fact_rows.push(ft.row(r).to_vec());
                    }
                }
            }
            let mut total = ces[0];
            for &ce in &ces[1..] {
                total = tape.add(total, ce).unwrap();
            }
            let total = tape.scale(total, 1.0 / dist.iterations as f64);
            tape.backward(total).unwrap();
            tape.export_grads(1.0 / cfg.batch as f32, |n, g| store.accumulate_grad(n, g));
        }
        store.adam_step(&adam);
        if step % 100 == 0 {
            let self_ce = ce_t8(&store, &dist, &grids[0], &grids[0].indices);
            let cross_ce = ce_t8(&store, &dist, &grids[1], &grids[0].indices);
            println!(
                "step {step}: CE(T=8, train) {:.3} aux {:.3} cos(factored) {:.3} self {:.3} cross {:.3} gap {:.3}",
                ce_last / cfg.batch as f64,
                aux_last / cfg.batch as f64,
                mean_cos(&fact_rows),
                self_ce,
                cross_ce,
                cross_ce - self_ce
            );
        }
    }
}
