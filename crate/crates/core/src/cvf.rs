//! Cross-view fusion: align the spatial view to the graph view, attend over
//! the two view tokens of each sample, refine and concatenate.

use face_diffcore::nn::linear;
use face_diffcore::{Graph, NodeId, ParamNodes, Real};

use crate::error::{FaceError, Result};

/// `Z̃_s = Z_s·W_sg + b_sg`.
pub fn align_view<T: Real>(g: &mut Graph<T>, zs: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    Ok(linear(g, zs, w, Some(b))?)
}

/// Projection matrices of one attention head, each `F×d_h`.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// Head projections `attn.{q,k,v}{l}` and output projection `attn.o`.
pub fn attention_nodes(p: &ParamNodes, heads: usize) -> Result<(Vec<HeadNodes>, NodeId)> {
    let hs = (0..heads)
        .map(|l| {
            Ok(HeadNodes {
                q: p.get(&format!("attn.q{l}"))?,
                k: p.get(&format!("attn.k{l}"))?,
                v: p.get(&format!("attn.v{l}"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((hs, p.get("attn.o")?))
}

/// Result of [`self_attention`] for the requested query tokens.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Per query token: `n×F` output after the output projection.
    pub outputs: Vec<NodeId>,
    /// Per query token, per head: `n×T` attention weights.
    pub weights: Vec<Vec<NodeId>>,
    /// Per query token, per head: `n×d_h` head output before projection.
    pub head_outputs: Vec<Vec<NodeId>>,
}

/// Multi-head scaled dot-product self-attention over a per-sample sequence
/// of `T` tokens, each given as an `n×F` node. Samples never mix.
pub fn self_attention<T: Real>(
    g: &mut Graph<T>,
    tokens: &[NodeId],
    heads: &[HeadNodes],
    wo: NodeId,
    queries: &[usize],
) -> Result<AttentionOutput> {
    if tokens.is_empty() || heads.is_empty() {
        return Err(FaceError::Precondition(
            "attention needs at least one token and one head".into(),
        ));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= tokens.len()) {
        return Err(FaceError::Precondition(format!(
            "query token {q} out of {} tokens",
            tokens.len()
        )));
    }
    let n = g.shape(tokens[0])[0];
    let t = tokens.len();
    let mut out = AttentionOutput {
        outputs: Vec::new(),
        weights: vec![Vec::new(); queries.len()],
        head_outputs: vec![Vec::new(); queries.len()],
    };
    for h in heads {
        let dh = g.shape(h.q)[1];
        let scale = 1.0 / (dh as f64).sqrt();
        let ks: Vec<NodeId> = tokens.iter().map(|&x| g.matmul(x, h.k)).collect::<std::result::Result<_, _>>()?;
        let vs: Vec<NodeId> = tokens.iter().map(|&x| g.matmul(x, h.v)).collect::<std::result::Result<_, _>>()?;
        for (qi, &tok) in queries.iter().enumerate() {
            let q = g.matmul(tokens[tok], h.q)?;
            let mut scores = Vec::with_capacity(t);
            for &k in &ks {
                let qk = g.mul(q, k)?;
                let s = g.sum_axis(qk, 1)?;
                scores.push(g.scale(s, scale)?);
            }
            let scores = if t == 1 { scores[0] } else { g.concat(&scores, 1)? };
            let w = g.softmax(scores)?;
            let mut acc = None;
            for (j, &v) in vs.iter().enumerate() {
                let wj = if t == 1 { w } else { g.slice(w, 1, j, 1)? };
                let wj = g.expand(wj, 1, dh)?;
                let term = g.mul(wj, v)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            out.weights[qi].push(w);
            out.head_outputs[qi].push(acc.expect("at least one token"));
        }
    }
    for per_head in &out.head_outputs {
        let cat = if per_head.len() == 1 {
            per_head[0]
        } else {
            g.concat(per_head, 1)?
        };
        out.outputs.push(g.matmul(cat, wo)?);
    }
    debug_assert!(out.outputs.iter().all(|&o| g.shape(o)[0] == n));
    Ok(out)
}

/// `Z_Δ`: attention over the tokens `(Z̃_s, Z_g)`, read at the spatial token.
pub fn cross_view_attention<T: Real>(
    g: &mut Graph<T>,
    zs_aligned: NodeId,
    zg: NodeId,
    heads: &[HeadNodes],
    wo: NodeId,
) -> Result<NodeId> {
    let a = self_attention(g, &[zs_aligned, zg], heads, wo, &[0])?;
    Ok(a.outputs[0])
}

/// `Z_u = [Z̃_s + Z_Δ ; Z_g]`.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    zs_aligned: NodeId,
    zg: NodeId,
    heads: &[HeadNodes],
    wo: NodeId,
) -> Result<NodeId> {
    let delta = cross_view_attention(g, zs_aligned, zg, heads, wo)?;
    let refined = g.add(zs_aligned, delta)?;
    Ok(g.concat(&[refined, zg], 1)?)
}
