//! Forward passes over cached group blocks.
//!
//! Group tokens never attend across groups: their K/V are fixed at cache
//! time. Query tokens (a planning suffix or a clustering probe) attend to
//! every supplied block's rows, in block order, then causally to their
//! own prefix. All reductions run sequentially so that an incremental
//! extension reproduces the from-scratch computation bit for bit.

use super::{KVBlock, LayerKv, TinyModel, TokenSeq};
use crate::error::{Error, Result};

/// Mean post-softmax attention mass a probe places on each group (block
/// order) and on its own tokens, averaged over probe tokens, heads, and
/// the layers that were run. Per row the group masses and `probe_self`
/// sum to 1.
#[derive(Debug, Clone)]
pub struct GroupAttention {
    pub per_group: Vec<f64>,
    pub probe_self: f64,
}

struct AttnAccum {
    per_block: Vec<f64>,
    own: f64,
    rows: u64,
}

struct RunRequest<'a> {
    blocks: &'a [&'a KVBlock],
    tokens: &'a [u32],
    start_pos: u32,
    layers: usize,
    collect_kv: bool,
    /// Compute final-layer logits for token indices >= this.
    logits_from: Option<usize>,
}

struct RunOutput {
    kv_rows: Option<Vec<LayerKv>>,
    logits: Vec<Vec<f32>>,
}

impl TinyModel {
    /// Rotary position where a planning suffix over `blocks` starts:
    /// one past the furthest cached position, so a single block at
    /// offset 0 is continued contiguously.
    pub fn suffix_offset(&self, blocks: &[&KVBlock]) -> u32 {
        blocks.iter().map(|b| b.end_position()).max().unwrap_or(0)
    }

    /// Full causal forward over `seq` alone; returns every layer's K/V
    /// rows at rotary positions `position_offset..`.
    pub fn compute_group_kv(&self, seq: &TokenSeq, position_offset: u32, group_id: u64) -> KVBlock {
        let mut block = KVBlock::empty(
            group_id,
            position_offset,
            self.cfg.num_layers,
            self.cfg.num_heads as u32,
            self.cfg.head_dim() as u32,
        );
        if seq.is_empty() {
            return block;
        }
        let out = self.run(
            RunRequest {
                blocks: &[],
                tokens: &seq.tokens,
                start_pos: position_offset,
                layers: self.cfg.num_layers,
                collect_kv: true,
                logits_from: None,
            },
            None,
        );
        block.append_rows(&out.kv_rows.unwrap(), seq.len() as u32);
        block
    }

    /// Continue a cached block by `new_tokens`. The result equals
    /// `compute_group_kv` over the concatenated sequence at the same
    /// offset; the existing rows are untouched.
    pub fn extend_group_kv(&self, block: &KVBlock, new_tokens: &TokenSeq) -> Result<KVBlock> {
        self.check_block(block, self.cfg.num_layers)?;
        let mut extended = block.clone();
        if new_tokens.is_empty() {
            return Ok(extended);
        }
        let out = self.run(
            RunRequest {
                blocks: &[block],
                tokens: &new_tokens.tokens,
                start_pos: block.end_position(),
                layers: self.cfg.num_layers,
                collect_kv: true,
                logits_from: None,
            },
            None,
        );
        extended.append_rows(&out.kv_rows.unwrap(), new_tokens.len() as u32);
        Ok(extended)
    }

    /// Discrete attention: suffix tokens attend to all blocks' K/V (in
    /// the given order) plus earlier suffix tokens; block tokens never
    /// attend across blocks. Returns final-layer logits per suffix
    /// position.
    pub fn attend_discrete(&self, blocks: &[&KVBlock], suffix: &TokenSeq) -> Result<Vec<Vec<f32>>> {
        if suffix.is_empty() {
            return Err(Error::EmptySuffix);
        }
        self.check_blocks(blocks, self.cfg.num_layers)?;
        let out = self.run(
            RunRequest {
                blocks,
                tokens: &suffix.tokens,
                start_pos: self.suffix_offset(blocks),
                layers: self.cfg.num_layers,
                collect_kv: false,
                logits_from: Some(0),
            },
            None,
        );
        Ok(out.logits)
    }

    /// Run only the first `layers_used` layers and report where the
    /// probe's attention mass lands. No blocks yields an empty score
    /// list.
    pub fn partial_forward_attention(
        &self,
        blocks: &[&KVBlock],
        probe: &TokenSeq,
        layers_used: usize,
    ) -> Result<GroupAttention> {
        assert!(
            layers_used >= 1 && layers_used <= self.cfg.num_layers,
            "layers_used must be in 1..=num_layers"
        );
        self.check_blocks(blocks, layers_used)?;
        let mut accum = AttnAccum {
            per_block: vec![0.0; blocks.len()],
            own: 0.0,
            rows: 0,
        };
        if !probe.is_empty() {
            self.run(
                RunRequest {
                    blocks,
                    tokens: &probe.tokens,
                    start_pos: self.suffix_offset(blocks),
                    layers: layers_used,
                    collect_kv: false,
                    logits_from: None,
                },
                Some(&mut accum),
            );
        }
        let rows = accum.rows.max(1) as f64;
        Ok(GroupAttention {
            per_group: accum.per_block.iter().map(|m| m / rows).collect(),
            probe_self: accum.own / rows,
        })
    }

    /// Teacher-forced log-probability of each candidate appended after
    /// `prompt_suffix`, under discrete attention over `blocks`.
    pub fn score_candidates(
        &self,
        blocks: &[&KVBlock],
        prompt_suffix: &TokenSeq,
        candidates: &[TokenSeq],
    ) -> Result<Vec<f64>> {
        self.check_blocks(blocks, self.cfg.num_layers)?;
        let start_pos = self.suffix_offset(blocks);
        let mut scores = Vec::with_capacity(candidates.len());
        for cand in candidates {
            if cand.is_empty() {
                return Err(Error::EmptyCandidate);
            }
            let full = prompt_suffix.concat(cand);
            // Token at index i is predicted from logits at i - 1; with an
            // empty prompt the candidate's first token has no context and
            // contributes nothing.
            let first_scored = prompt_suffix.len().max(1);
            let logits_from = first_scored - 1;
            let out = self.run(
                RunRequest {
                    blocks,
                    tokens: &full.tokens,
                    start_pos,
                    layers: self.cfg.num_layers,
                    collect_kv: false,
                    logits_from: Some(logits_from),
                },
                None,
            );
            let mut total = 0.0f64;
            for i in first_scored..full.len() {
                let row = &out.logits[i - 1 - logits_from];
                total += log_softmax_at(row, full.tokens[i] as usize);
            }
            scores.push(total);
        }
        Ok(scores)
    }

    fn check_block(&self, b: &KVBlock, need_layers: usize) -> Result<()> {
        if b.layer_count() < need_layers
            || b.num_heads() as usize != self.cfg.num_heads
            || b.head_dim() as usize != self.cfg.head_dim()
        {
            return Err(Error::ModelMismatch {
                block_layers: b.layer_count(),
                block_head_dim: b.head_dim() as usize,
                model_layers: self.cfg.num_layers,
                model_head_dim: self.cfg.head_dim(),
            });
        }
        Ok(())
    }

    fn check_blocks(&self, blocks: &[&KVBlock], need_layers: usize) -> Result<()> {
        for (i, b) in blocks.iter().enumerate() {
            self.check_block(b, need_layers)?;
            if blocks[..i].iter().any(|o| o.group_id == b.group_id) {
                return Err(Error::DuplicateBlock(b.group_id));
            }
        }
        Ok(())
    }

    fn run(&self, req: RunRequest<'_>, mut attn_accum: Option<&mut AttnAccum>) -> RunOutput {
        let d = self.cfg.model_dim;
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let hidden = self.cfg.hidden_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let n = req.tokens.len();

        let mut own: Vec<LayerKv> = (0..req.layers)
            .map(|_| LayerKv {
                k: Vec::with_capacity(n * d),
                v: Vec::with_capacity(n * d),
            })
            .collect();
        let mut logits: Vec<Vec<f32>> = Vec::new();

        let ctx_rows: usize = req.blocks.iter().map(|b| b.token_count() as usize).sum();
        let mut scores: Vec<f32> = Vec::with_capacity(ctx_rows + n);

        let mut x = vec![0.0f32; d];
        let mut xn = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut attn_out = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut up = vec![0.0f32; hidden];

        for (j, &tok) in req.tokens.iter().enumerate() {
            let pos = req.start_pos + j as u32;
            let row = tok as usize * d;
            x.copy_from_slice(&self.embed[row..row + d]);

            for (l, lw) in self.layers.iter().take(req.layers).enumerate() {
                rmsnorm(&x, &mut xn);
                matvec(&lw.wq, &xn, &mut q, d);
                matvec(&lw.wk, &xn, &mut k, d);
                matvec(&lw.wv, &xn, &mut v, d);
                for h in 0..heads {
                    rope(&mut q[h * hd..(h + 1) * hd], pos, self.cfg.rope_base);
                    rope(&mut k[h * hd..(h + 1) * hd], pos, self.cfg.rope_base);
                }
                own[l].k.extend_from_slice(&k);
                own[l].v.extend_from_slice(&v);

                for h in 0..heads {
                    let qh = &q[h * hd..(h + 1) * hd];
                    scores.clear();
                    for b in req.blocks {
                        let lk = &b.layers[l].k;
                        for t in 0..b.token_count() as usize {
                            let at = (t * heads + h) * hd;
                            scores.push(dot(qh, &lk[at..at + hd]) * scale);
                        }
                    }
                    for t in 0..=j {
                        let at = (t * heads + h) * hd;
                        scores.push(dot(qh, &own[l].k[at..at + hd]) * scale);
                    }
                    softmax(&mut scores);

                    if let Some(accum) = attn_accum.as_deref_mut() {
                        let mut at = 0usize;
                        for (bi, b) in req.blocks.iter().enumerate() {
                            let t = b.token_count() as usize;
                            accum.per_block[bi] +=
                                scores[at..at + t].iter().map(|&w| w as f64).sum::<f64>();
                            at += t;
                        }
                        accum.own += scores[at..].iter().map(|&w| w as f64).sum::<f64>();
                        accum.rows += 1;
                    }

                    let oh = &mut attn_out[h * hd..(h + 1) * hd];
                    oh.fill(0.0);
                    let mut wi = 0usize;
                    for b in req.blocks {
                        let lv = &b.layers[l].v;
                        for t in 0..b.token_count() as usize {
                            let at = (t * heads + h) * hd;
                            axpy(oh, scores[wi], &lv[at..at + hd]);
                            wi += 1;
                        }
                    }
                    for t in 0..=j {
                        let at = (t * heads + h) * hd;
                        axpy(oh, scores[wi], &own[l].v[at..at + hd]);
                        wi += 1;
                    }
                }

                matvec(&lw.wo, &attn_out, &mut proj, d);
                add_assign(&mut x, &proj);

                rmsnorm(&x, &mut xn);
                matvec(&lw.w_up, &xn, &mut up, d);
                for u in up.iter_mut() {
                    *u = silu(*u);
                }
                matvec(&lw.w_down, &up, &mut proj, hidden);
                add_assign(&mut x, &proj);
            }

            if let Some(from) = req.logits_from {
                if j >= from {
                    rmsnorm(&x, &mut xn);
                    let vocab = self.cfg.vocab_size as usize;
                    let mut row = vec![0.0f32; vocab];
                    for (t, slot) in row.iter_mut().enumerate() {
                        *slot = dot(&self.unembed[t * d..(t + 1) * d], &xn);
                    }
                    logits.push(row);
                }
            }
        }

        RunOutput {
            kv_rows: req.collect_kv.then_some(own),
            logits,
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn axpy(out: &mut [f32], alpha: f32, row: &[f32]) {
    for i in 0..out.len() {
        out[i] += alpha * row[i];
    }
}

fn add_assign(out: &mut [f32], rhs: &[f32]) {
    for i in 0..out.len() {
        out[i] += rhs[i];
    }
}

/// `out[r] = sum_c w[r * in_dim + c] * x[c]`, rows sequential.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32], in_dim: usize) {
    for (r, slot) in out.iter_mut().enumerate() {
        *slot = dot(&w[r * in_dim..(r + 1) * in_dim], x);
    }
}

fn rmsnorm(x: &[f32], out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &xi in x {
        ss += xi * xi;
    }
    let inv = 1.0 / (ss / x.len() as f32 + 1e-5).sqrt();
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = xi * inv;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn softmax(scores: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &s in scores.iter() {
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in scores.iter_mut() {
        *s *= inv;
    }
}

/// Half-rotation rotary embedding: pairs `(i, i + hd/2)` rotate by
/// `pos * base^(-2i/hd)`. Angles are computed in f64 before narrowing.
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

fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let mut max = f32::NEG_INFINITY;
    for &s in logits {
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0f64;
    for &s in logits {
        sum += f64::from(s - max).exp();
    }
    f64::from(logits[index] - max) - sum.ln()
}
