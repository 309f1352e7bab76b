//! A small pre-norm vision transformer: conv patch embedding, CLS token,
//! learned position embeddings, multi-head self-attention blocks with GELU
//! MLPs, no dropout anywhere (condensation needs deterministic gradients).

use super::{const_param, normal_param, uniform_param, FeatureStack, ModelSpec, Param, StagedParams};
use crate::error::Result;
use hmdc_tensor::compose::{gelu, layer_norm, linear, softmax_last};
use hmdc_tensor::{NodeId, Scalar, Tape};
use rand::Rng;

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

fn block_ids(b: usize) -> BlockIds {
    let base = 4 + b * 12;
    BlockIds {
        ln1_g: base,
        ln1_b: base + 1,
        qkv_w: base + 2,
        qkv_b: base + 3,
        proj_w: base + 4,
        proj_b: base + 5,
        ln2_g: base + 6,
        ln2_b: base + 7,
        fc1_w: base + 8,
        fc1_b: base + 9,
        fc2_w: base + 10,
        fc2_b: base + 11,
    }
}

pub(super) fn init_params<T: Scalar>(
    spec: &ModelSpec,
    patch: usize,
    dim: usize,
    depth: usize,
    _heads: usize,
    rng: &mut impl Rng,
) -> Vec<Param<T>> {
    let (c_in, h, w) = spec.image_shape;
    let tokens = (h / patch) * (w / patch) + 1;
    let mut params = Vec::new();
    let patch_fan = c_in * patch * patch;
    params.push(uniform_param(
        rng,
        "patch.weight",
        &[dim, c_in, patch, patch],
        1.0 / (patch_fan as f64).sqrt(),
    ));
    params.push(const_param("patch.bias", &[dim], 0.0));
    params.push(normal_param(rng, "cls", &[dim], 0.02));
    params.push(normal_param(rng, "pos", &[tokens, dim], 0.02));
    let lin_bound = 1.0 / (dim as f64).sqrt();
    let hidden = dim * MLP_RATIO;
    for b in 0..depth {
        params.push(const_param(&format!("block{b}.ln1.gamma"), &[dim], 1.0));
        params.push(const_param(&format!("block{b}.ln1.beta"), &[dim], 0.0));
        params.push(uniform_param(rng, &format!("block{b}.attn.qkv.weight"), &[3 * dim, dim], lin_bound));
        params.push(const_param(&format!("block{b}.attn.qkv.bias"), &[3 * dim], 0.0));
        params.push(uniform_param(rng, &format!("block{b}.attn.proj.weight"), &[dim, dim], lin_bound));
        params.push(const_param(&format!("block{b}.attn.proj.bias"), &[dim], 0.0));
        params.push(const_param(&format!("block{b}.ln2.gamma"), &[dim], 1.0));
        params.push(const_param(&format!("block{b}.ln2.beta"), &[dim], 0.0));
        params.push(uniform_param(rng, &format!("block{b}.mlp.fc1.weight"), &[hidden, dim], lin_bound));
        params.push(const_param(&format!("block{b}.mlp.fc1.bias"), &[hidden], 0.0));
        params.push(uniform_param(
            rng,
            &format!("block{b}.mlp.fc2.weight"),
            &[dim, hidden],
            1.0 / (hidden as f64).sqrt(),
        ));
        params.push(const_param(&format!("block{b}.mlp.fc2.bias"), &[dim], 0.0));
    }
    params.push(const_param("norm.gamma", &[dim], 1.0));
    params.push(const_param("norm.beta", &[dim], 0.0));
    params.push(uniform_param(rng, "head.weight", &[spec.num_classes, dim], lin_bound));
    params.push(uniform_param(rng, "head.bias", &[spec.num_classes], lin_bound));
    params
}

fn norm_tokens<T: Scalar>(t: &Tape<T>, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let s = t.shape(x); // [N, T, D]
    let flat = t.reshape(x, &[s[0] * s[1], s[2]]);
    let y = layer_norm(t, flat, gamma, beta, LN_EPS);
    t.reshape(y, &s)
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    t: &Tape<T>,
    x: NodeId, // [N, T, D]
    qkv_w: NodeId,
    qkv_b: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    heads: usize,
) -> NodeId {
    let s = t.shape(x);
    let (n, tok, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let flat = t.reshape(x, &[n * tok, d]);
    let qkv = linear(t, flat, qkv_w, qkv_b); // [N*T, 3D]
    let qkv = t.reshape(qkv, &[n, tok, 3, heads, dh]);
    let qkv = t.permute(qkv, &[2, 0, 3, 1, 4]); // [3, N, H, T, dh]
    let pick = |i: usize| {
        let part = t.slice_axis(qkv, 0, i, i + 1);
        t.reshape(part, &[n * heads, tok, dh])
    };
    let (q, k, v) = (pick(0), pick(1), pick(2));
    let kt = t.permute(k, &[0, 2, 1]);
    let scores = t.scale(t.bmm(q, kt), 1.0 / (dh as f64).sqrt());
    let attn = softmax_last(t, scores);
    let ctx = t.bmm(attn, v); // [N*H, T, dh]
    let ctx = t.reshape(ctx, &[n, heads, tok, dh]);
    let ctx = t.permute(ctx, &[0, 2, 1, 3]);
    let ctx = t.reshape(ctx, &[n * tok, d]);
    let out = linear(t, ctx, proj_w, proj_b);
    t.reshape(out, &[n, tok, d])
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<T: Scalar>(
    tape: &Tape<T>,
    spec: &ModelSpec,
    staged: &StagedParams,
    x: NodeId,
    patch: usize,
    dim: usize,
    depth: usize,
    heads: usize,
) -> Result<(NodeId, FeatureStack)> {
    let ids = &staged.ids;
    let shape = tape.shape(x);
    let n = shape[0];
    let (gh, gw) = (shape[2] / patch, shape[3] / patch);
    let tok = gh * gw + 1;

    // patch embedding
    let emb = tape.conv2d(x, ids[0], patch, 0); // [N, D, gh, gw]
    let emb = tape.reshape(emb, &[n, dim, gh * gw]);
    let emb = tape.permute(emb, &[0, 2, 1]); // [N, T-1, D]
    let emb_flat = tape.reshape(emb, &[n * (gh * gw), dim]);
    let pb = tape.broadcast_axis(ids[1], 0, n * (gh * gw));
    let emb = tape.reshape(tape.add(emb_flat, pb), &[n, gh * gw, dim]);

    // CLS token + position embeddings
    let cls = tape.reshape(tape.broadcast_axis(ids[2], 0, n), &[n, 1, dim]);
    let mut h = tape.concat(&[cls, emb], 1); // [N, T, D]
    let pos = tape.broadcast_axis(ids[3], 0, n);
    h = tape.add(h, pos);

    let mut taps = Vec::with_capacity(depth);
    for b in 0..depth {
        let ix = block_ids(b);
        let normed = norm_tokens(tape, h, ids[ix.ln1_g], ids[ix.ln1_b]);
        let att = attention(
            tape,
            normed,
            ids[ix.qkv_w],
            ids[ix.qkv_b],
            ids[ix.proj_w],
            ids[ix.proj_b],
            heads,
        );
        h = tape.add(h, att);
        let normed2 = norm_tokens(tape, h, ids[ix.ln2_g], ids[ix.ln2_b]);
        let s = tape.shape(normed2);
        let flat = tape.reshape(normed2, &[s[0] * s[1], s[2]]);
        let mid = gelu(tape, linear(tape, flat, ids[ix.fc1_w], ids[ix.fc1_b]));
        let out = linear(tape, mid, ids[ix.fc2_w], ids[ix.fc2_b]);
        let mlp = tape.reshape(out, &[s[0], s[1], s[2]]);
        h = tape.add(h, mlp);
        taps.push(h);
    }

    let base = 4 + depth * 12;
    let final_norm = norm_tokens(tape, h, ids[base], ids[base + 1]);
    let cls_tok = tape.reshape(tape.slice_axis(final_norm, 1, 0, 1), &[n, dim]);
    let logits = linear(tape, cls_tok, ids[base + 2], ids[base + 3]);
    debug_assert_eq!(tape.shape(logits), vec![n, spec.num_classes]);
    debug_assert_eq!(tape.shape(h), vec![n, tok, dim]);
    Ok((logits, FeatureStack::TokenGrid { layers: taps, grid: (gh, gw) }))
}
