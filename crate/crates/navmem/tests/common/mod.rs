//! Reference implementations the integration suites check against.
//! These stay independent of the library's incremental forward and
//! solver paths: the transformer reference materializes the full masked
//! attention matrix over explicit per-token positions, and the knapsack
//! oracle enumerates subsets.

use navmem::model::TinyModel;
use navmem::navmap::GroupId;
use navmem::retrieval::KnapsackInstance;

/// Full masked forward over concatenated segments at explicit rotary
/// positions. Every segment except the last is a cached group: its
/// tokens attend causally within the segment only. Tokens of the last
/// segment (the query suffix) attend to all earlier segments plus their
/// own causal prefix. Returns final-layer logits for the suffix tokens.
pub fn reference_masked_forward(
    model: &TinyModel,
    segments: &[(Vec<u32>, u32)],
) -> Vec<Vec<f32>> {
    let cfg = *model.config();
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let hidden = cfg.hidden_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let suffix_segment = segments.len() - 1;

    let mut seg_of: Vec<usize> = Vec::new();
    let mut pos_of: Vec<u32> = Vec::new();
    let mut tokens: Vec<u32> = Vec::new();
    for (si, (seg, start)) in segments.iter().enumerate() {
        for (i, &t) in seg.iter().enumerate() {
            seg_of.push(si);
            pos_of.push(start + i as u32);
            tokens.push(t);
        }
    }
    let n = tokens.len();
    let allowed = |i: usize, j: usize| -> bool {
        if seg_of[i] == seg_of[j] {
            j <= i
        } else {
            seg_of[i] == suffix_segment
        }
    };

    let mut states: Vec<Vec<f32>> = tokens
        .iter()
        .map(|&t| model.embed[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();

    for lw in &model.layers {
        // Projections at this layer, rope applied at each token's own
        // position.
        let mut qs = vec![vec![0.0f32; d]; n];
        let mut ks = vec![vec![0.0f32; d]; n];
        let mut vs = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            let xn = rmsnorm(&states[i]);
            qs[i] = matvec(&lw.wq, &xn, d);
            ks[i] = matvec(&lw.wk, &xn, d);
            vs[i] = matvec(&lw.wv, &xn, d);
            for h in 0..heads {
                rope(&mut qs[i][h * hd..(h + 1) * hd], pos_of[i], cfg.rope_base);
                rope(&mut ks[i][h * hd..(h + 1) * hd], pos_of[i], cfg.rope_base);
            }
        }
        for i in 0..n {
            let mut attn = vec![0.0f32; d];
            for h in 0..heads {
                let q = &qs[i][h * hd..(h + 1) * hd];
                let mut cols: Vec<usize> = Vec::new();
                let mut scores: Vec<f32> = Vec::new();
                #[allow(clippy::needless_range_loop)]
                for j in 0..n {
                    if allowed(i, j) {
                        cols.push(j);
                        let k = &ks[j][h * hd..(h + 1) * hd];
                        let mut s = 0.0f32;
                        for t in 0..hd {
                            s += q[t] * k[t];
                        }
                        scores.push(s * scale);
                    }
                }
                let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (w, &j) in scores.iter().zip(&cols) {
                    let v = &vs[j][h * hd..(h + 1) * hd];
                    let alpha = w / denom;
                    for t in 0..hd {
                        attn[h * hd + t] += alpha * v[t];
                    }
                }
            }
            let proj = matvec(&lw.wo, &attn, d);
            for t in 0..d {
                states[i][t] += proj[t];
            }
            let hn = rmsnorm(&states[i]);
            let mut up = matvec(&lw.w_up, &hn, d);
            for u in up.iter_mut() {
                *u = *u / (1.0 + (-*u).exp());
            }
            let down = matvec(&lw.w_down, &up, hidden);
            for t in 0..d {
                states[i][t] += down[t];
            }
        }
    }

    let vocab = cfg.vocab_size as usize;
    let mut out = Vec::new();
    for i in 0..n {
        if seg_of[i] != suffix_segment {
            continue;
        }
        let xn = rmsnorm(&states[i]);
        let mut logits = vec![0.0f32; vocab];
        for (t, slot) in logits.iter_mut().enumerate() {
            let row = &model.unembed[t * d..(t + 1) * d];
            let mut acc = 0.0f32;
            for c in 0..d {
                acc += row[c] * xn[c];
            }
            *slot = acc;
        }
        out.push(logits);
    }
    out
}

fn rmsnorm(x: &[f32]) -> Vec<f32> {
    let ss: f32 = x.iter().map(|v| v * v).sum();
    let inv = 1.0 / (ss / x.len() as f32 + 1e-5).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn matvec(w: &[f32], x: &[f32], in_dim: usize) -> Vec<f32> {
    let rows = w.len() / in_dim;
    let mut out = vec![0.0f32; rows];
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &w[r * in_dim..(r + 1) * in_dim];
        let mut acc = 0.0f32;
        for c in 0..in_dim {
            acc += row[c] * x[c];
        }
        *slot = acc;
    }
    out
}

fn rope(xs: &mut [f32], pos: u32, base: f64) {
    let half = xs.len() / 2;
    for i in 0..half {
        let inv_freq = base.powf(-2.0 * i as f64 / xs.len() as f64);
        let (sin, cos) = (f64::from(pos) * inv_freq).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (xs[i], xs[i + half]);
        xs[i] = a * cos - b * sin;
        xs[i + half] = a * sin + b * cos;
    }
}

/// Exhaustive selection optimum. Values are summed in ascending-id
/// order, matching how the solver reports objectives, so equality can be
/// asserted exactly. Ties prefer the lexicographically smallest id set.
pub fn brute_force_select(inst: &KnapsackInstance) -> (f64, Vec<GroupId>) {
    let n = inst.group_ids.len();
    assert!(n <= 20, "oracle is exponential");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| inst.group_ids[i]);

    let mut best_value = 0.0f64;
    let mut best_mask = 0u64;
    for mask in 0u64..(1 << n) {
        let mut value = 0.0f64;
        let mut weight = 0u64;
        let mut ok = true;
        for (bit, &i) in order.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                let v = inst.probabilities[i] - inst.threshold;
                if v <= 0.0 {
                    ok = false;
                    break;
                }
                value += v;
                weight = weight.saturating_add(inst.sizes[i]);
            }
        }
        if !ok || weight > inst.budget {
            continue;
        }
        let lex_smaller = {
            let d = mask ^ best_mask;
            d != 0 && (mask & d & d.wrapping_neg()) != 0
        };
        if value > best_value || (value == best_value && lex_smaller) {
            best_value = value;
            best_mask = mask;
        }
    }
    let ids = order
        .iter()
        .enumerate()
        .filter(|(bit, _)| best_mask & (1 << bit) != 0)
        .map(|(_, &i)| inst.group_ids[i])
        .collect();
    (best_value, ids)
}

/// Mixed absolute/relative closeness for logit comparisons.
pub fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn assert_logits_close(a: &[Vec<f32>], b: &[Vec<f32>], tol: f32, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: row counts differ");
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        assert_eq!(ra.len(), rb.len());
        for (j, (&x, &y)) in ra.iter().zip(rb).enumerate() {
            assert!(
                close(x, y, tol),
                "{what}: logits[{i}][{j}] {x} vs {y} (diff {})",
                (x - y).abs()
            );
        }
    }
}
