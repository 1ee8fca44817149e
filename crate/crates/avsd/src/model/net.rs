//! Graph builders for the shared frontends, the Transformer encoder
//! (student and EMA teacher), and the attention decoder with its CTC head.
//!
//! Parameter names mirror the `ParamStore` layout exactly; the teacher
//! binds the same encoder names under a "tch." prefix as non-trainable
//! inputs, so no optimizer gradient can ever reach it. Frontends exist
//! once and are consumed by both student and teacher paths.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::model::params::{init_layer_norm, init_linear, init_normal, ParamStore};

pub const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax value that zeroes masked attention links.
const NEG_INF_MASK: f64 = -1e30;
/// Visual frontend conv channels; input frames carry 3 channels
/// (value, x-weighted value, y-weighted value).
pub const VF_IN_CH: usize = 3;
pub const VF_C1: usize = 12;
pub const VF_C2: usize = 24;
const VF_KERNEL: usize = 3;
const VF_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Model width; also the per-modality frontend output dimension.
    pub width: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub n_tokens: usize,
    /// Stacked audio input dimension (26 mel-like channels x 4 frames).
    pub audio_stacked: usize,
    /// Kernel of the convolutional relative positional layer (odd).
    pub conv_pos_kernel: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            width: 64,
            enc_blocks: 4,
            dec_blocks: 2,
            heads: 4,
            ffn: 256,
            n_tokens: 32,
            audio_stacked: 104,
            conv_pos_kernel: 5,
        }
    }
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        assert!(self.width % self.heads == 0, "width must divide into heads");
        self.width / self.heads
    }

    /// Decoder output classes: tokens plus EOS (embedding reuses the same
    /// extra row for BOS on the input side).
    pub fn dec_width(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn ctc_width(&self) -> usize {
        self.n_tokens + 1
    }
}

/// Spatial output size of one valid conv with the frontend kernel/stride.
fn conv_out(size: usize) -> usize {
    (size - VF_KERNEL) / VF_STRIDE + 1
}

// ── parameter initialization ──

/// Creates frontend + encoder parameters (the pretrainable set).
pub fn init_encoder_params(store: &mut ParamStore, seed: u64, dims: &ModelDims) {
    let w = dims.width;
    init_linear(store, seed, "front.audio", dims.audio_stacked, w);
    init_linear(store, seed, "front.video.conv1", VF_KERNEL * VF_KERNEL * VF_IN_CH, VF_C1);
    init_linear(store, seed, "front.video.conv2", VF_KERNEL * VF_KERNEL * VF_C1, VF_C2);
    init_linear(store, seed, "front.video.proj", VF_C2, w);
    init_layer_norm(store, "front.fusion.ln", 2 * w);
    init_linear(store, seed, "front.fusion", 2 * w, w);
    store.set("front.mask.audio", init_normal(seed, "front.mask.audio", &[w], 0.1));
    store.set("front.mask.video", init_normal(seed, "front.mask.video", &[w], 0.1));

    init_linear(store, seed, "enc.pos", dims.conv_pos_kernel * w, w);
    for i in 0..dims.enc_blocks {
        let b = format!("enc.b{i}");
        init_layer_norm(store, &format!("{b}.ln1"), w);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, seed, &format!("{b}.attn.{proj}"), w, w);
        }
        init_layer_norm(store, &format!("{b}.ln2"), w);
        init_linear(store, seed, &format!("{b}.ffn.l1"), w, dims.ffn);
        init_linear(store, seed, &format!("{b}.ffn.l2"), dims.ffn, w);
    }
    init_layer_norm(store, "enc.final_ln", w);
}

/// Creates decoder + CTC-projection parameters (fresh at fine-tune time).
pub fn init_decoder_params(store: &mut ParamStore, seed: u64, dims: &ModelDims) {
    let w = dims.width;
    store.set(
        "dec.emb",
        init_normal(seed, "dec.emb", &[dims.n_tokens + 1, w], 0.1),
    );
    for i in 0..dims.dec_blocks {
        let b = format!("dec.b{i}");
        init_layer_norm(store, &format!("{b}.ln1"), w);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, seed, &format!("{b}.self.{proj}"), w, w);
        }
        init_layer_norm(store, &format!("{b}.lnc"), w);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, seed, &format!("{b}.cross.{proj}"), w, w);
        }
        init_layer_norm(store, &format!("{b}.ln2"), w);
        init_linear(store, seed, &format!("{b}.ffn.l1"), w, dims.ffn);
        init_linear(store, seed, &format!("{b}.ffn.l2"), dims.ffn, w);
    }
    init_layer_norm(store, "dec.final_ln", w);
    init_linear(store, seed, "dec.out", w, dims.dec_width());
    init_linear(store, seed, "ctc.out", w, dims.ctc_width());
}

// ── graph construction ──

pub struct NetBuilder<'a> {
    pub g: &'a mut Graph,
    pub dims: &'a ModelDims,
}

impl<'a> NetBuilder<'a> {
    pub fn new(g: &'a mut Graph, dims: &'a ModelDims) -> Self {
        NetBuilder { g, dims }
    }

    fn param(&mut self, trainable: bool, name: &str) -> NodeId {
        self.g.input(name, trainable)
    }

    fn linear_p(&mut self, x: NodeId, prefix: &str, trainable: bool) -> NodeId {
        let w = self.param(trainable, &format!("{prefix}.w"));
        let b = self.param(trainable, &format!("{prefix}.b"));
        self.g.linear(x, w, b)
    }

    fn layer_norm_p(&mut self, x: NodeId, prefix: &str, trainable: bool) -> NodeId {
        let gamma = self.param(trainable, &format!("{prefix}.g"));
        let beta = self.param(trainable, &format!("{prefix}.b"));
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Stacked audio [T, audio_stacked] -> features [T, W].
    pub fn audio_frontend(&mut self, audio: NodeId) -> NodeId {
        self.linear_p(audio, "front.audio", true)
    }

    /// Channelized video [T, h*w*VF_IN_CH] -> features [T, W].
    pub fn video_frontend(&mut self, video: NodeId, h: usize, w: usize) -> NodeId {
        let o1 = conv_out(h.min(w));
        debug_assert_eq!(conv_out(h), conv_out(w), "square frames expected");
        let u1 = self.g.unfold2d(video, h, w, VF_IN_CH, VF_KERNEL, VF_STRIDE);
        let c1 = self.linear_p(u1, "front.video.conv1", true);
        let c1 = self.g.relu(c1);
        let r1 = self.g.regroup(c1, o1 * o1);
        let o2 = conv_out(o1);
        let u2 = self.g.unfold2d(r1, o1, o1, VF_C1, VF_KERNEL, VF_STRIDE);
        let c2 = self.linear_p(u2, "front.video.conv2", true);
        let c2 = self.g.relu(c2);
        let pooled = self.g.mean_pool_rows(c2, o2 * o2);
        self.linear_p(pooled, "front.video.proj", true)
    }

    /// Channel-wise fusion of the two feature streams -> [T, W].
    pub fn fusion(&mut self, f_a: NodeId, f_v: NodeId) -> NodeId {
        let cat = self.g.concat_cols(f_a, f_v);
        let normed = self.layer_norm_p(cat, "front.fusion.ln", true);
        self.linear_p(normed, "front.fusion", true)
    }

    /// Replaces masked feature rows with the learned mask embedding.
    pub fn corrupt_with_mask_embedding(&mut self, feats: NodeId, which: &str, rows: Vec<usize>) -> NodeId {
        if rows.is_empty() {
            return feats;
        }
        let emb = self.param(true, &format!("front.mask.{which}"));
        self.g.row_replace(feats, emb, rows)
    }

    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        trainable: bool,
        causal_len: Option<usize>,
    ) -> NodeId {
        let dims = self.dims.clone();
        let dh = dims.head_dim();
        let q = self.linear_p(q_in, &format!("{prefix}.q"), trainable);
        let k = self.linear_p(kv_in, &format!("{prefix}.k"), trainable);
        let v = self.linear_p(kv_in, &format!("{prefix}.v"), trainable);
        let mask = causal_len.map(|n| self.g.constant(causal_mask(n)));
        let mut heads = Vec::with_capacity(dims.heads);
        for h in 0..dims.heads {
            let qh = self.g.slice_cols(q, h * dh, dh);
            let kh = self.g.slice_cols(k, h * dh, dh);
            let vh = self.g.slice_cols(v, h * dh, dh);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let mut scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = self.g.add(scores, m);
            }
            let att = self.g.softmax(scores);
            heads.push(self.g.matmul(att, vh));
        }
        let mut cat = heads[0];
        for &h in &heads[1..] {
            cat = self.g.concat_cols(cat, h);
        }
        self.linear_p(cat, &format!("{prefix}.o"), trainable)
    }

    fn ffn(&mut self, x: NodeId, prefix: &str, trainable: bool) -> NodeId {
        let h = self.linear_p(x, &format!("{prefix}.l1"), trainable);
        let h = self.g.gelu(h);
        self.linear_p(h, &format!("{prefix}.l2"), trainable)
    }

    /// Pre-LN Transformer encoder: conv positional layer, N blocks, final
    /// layer norm. `prefix` is "" for the student and "tch." for the
    /// teacher; returns (final output, per-block residual outputs).
    pub fn encoder(&mut self, x: NodeId, prefix: &str, trainable: bool) -> (NodeId, Vec<NodeId>) {
        let kernel = self.dims.conv_pos_kernel;
        let unfolded = self.g.unfold1d(x, kernel);
        let pos = self.linear_p(unfolded, &format!("{prefix}enc.pos"), trainable);
        let pos = self.g.gelu(pos);
        let mut x = self.g.add(x, pos);
        let mut block_outs = Vec::with_capacity(self.dims.enc_blocks);
        for i in 0..self.dims.enc_blocks {
            let b = format!("{prefix}enc.b{i}");
            let a_in = self.layer_norm_p(x, &format!("{b}.ln1"), trainable);
            let att = self.attention(a_in, a_in, &format!("{b}.attn"), trainable, None);
            let x2 = self.g.add(x, att);
            let f_in = self.layer_norm_p(x2, &format!("{b}.ln2"), trainable);
            let ff = self.ffn(f_in, &format!("{b}.ffn"), trainable);
            x = self.g.add(x2, ff);
            block_outs.push(x);
        }
        let final_out = self.layer_norm_p(x, &format!("{prefix}enc.final_ln"), trainable);
        (final_out, block_outs)
    }

    /// Teacher targets: instance-normalize each of the last k block
    /// outputs over time, average, stop gradient. Returns the detached
    /// target and the node just before the stop-gradient.
    pub fn teacher_targets(&mut self, block_outs: &[NodeId], k: usize) -> (NodeId, NodeId) {
        assert!(k >= 1 && k <= block_outs.len(), "target layer count {k} of {}", block_outs.len());
        let picked = &block_outs[block_outs.len() - k..];
        let mut acc: Option<NodeId> = None;
        for &b in picked {
            let normed = self.g.instance_norm(b, LN_EPS);
            acc = Some(match acc {
                None => normed,
                Some(a) => self.g.add(a, normed),
            });
        }
        let mean = self.g.scale(acc.expect("k >= 1"), 1.0 / k as f64);
        (self.g.stop_grad(mean), mean)
    }

    /// Teacher-forced decoder: embeds `input_ids` (BOS-prefixed), runs
    /// causally masked self-attention plus cross-attention over the
    /// encoder output, and returns logits [len(input_ids), dec_width].
    pub fn decoder_logits(&mut self, enc_out: NodeId, input_ids: &[usize]) -> NodeId {
        let n = input_ids.len();
        assert!(n >= 1, "decoder needs at least BOS");
        let emb_table = self.param(true, "dec.emb");
        let emb = self.g.gather_rows(emb_table, input_ids.to_vec());
        let pos = self.g.constant(sin_positions(n, self.dims.width));
        let mut x = self.g.add(emb, pos);
        for i in 0..self.dims.dec_blocks {
            let b = format!("dec.b{i}");
            let a_in = self.layer_norm_p(x, &format!("{b}.ln1"), true);
            let self_att = self.attention(a_in, a_in, &format!("{b}.self"), true, Some(n));
            let x2 = self.g.add(x, self_att);
            let c_in = self.layer_norm_p(x2, &format!("{b}.lnc"), true);
            let cross = self.attention(c_in, enc_out, &format!("{b}.cross"), true, None);
            let x3 = self.g.add(x2, cross);
            let f_in = self.layer_norm_p(x3, &format!("{b}.ln2"), true);
            let ff = self.ffn(f_in, &format!("{b}.ffn"), true);
            x = self.g.add(x3, ff);
        }
        let out = self.layer_norm_p(x, "dec.final_ln", true);
        self.linear_p(out, "dec.out", true)
    }

    /// CTC branch: encoder output -> per-frame posteriors [T, ctc_width].
    pub fn ctc_posteriors(&mut self, enc_out: NodeId) -> NodeId {
        let logits = self.linear_p(enc_out, "ctc.out", true);
        self.g.softmax(logits)
    }
}

/// Additive causal mask: 0 at or below the diagonal, -inf-like above.
fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = NEG_INF_MASK;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Sinusoidal position encodings [n, width].
fn sin_positions(n: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; n * width];
    for pos in 0..n {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, width], data).expect("rectangular encoding")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate, Bindings, Graph};
    use crate::oracle;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            width: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            ffn: 12,
            n_tokens: 3,
            audio_stacked: 10,
            conv_pos_kernel: 3,
        }
    }

    fn tiny_stores(dims: &ModelDims) -> ParamStore {
        let mut store = ParamStore::new();
        init_encoder_params(&mut store, 5, dims);
        init_decoder_params(&mut store, 6, dims);
        store
    }

    fn video_input(t: usize, h: usize) -> Tensor {
        let n = t * h * h * VF_IN_CH;
        Tensor::new(
            vec![t, h * h * VF_IN_CH],
            (0..n).map(|i| ((i as f64) * 0.7).sin() * 0.3).collect(),
        )
        .unwrap()
    }

    fn audio_input(t: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|i| ((i as f64) * 0.3).cos() * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn end_to_end_shapes() {
        let dims = tiny_dims();
        let store = tiny_stores(&dims);
        let mut g = Graph::new();
        let mut b = NetBuilder::new(&mut g, &dims);
        let audio = b.g.data_input("audio");
        let video = b.g.data_input("video");
        let f_a = b.audio_frontend(audio);
        let f_v = b.video_frontend(video, 8, 8);
        let fused = b.fusion(f_a, f_v);
        let (enc_out, block_outs) = b.encoder(fused, "", true);
        let (targets, _) = b.teacher_targets(&block_outs, 1);
        let logits = b.decoder_logits(enc_out, &[3, 0, 1]);
        let ctc = b.ctc_posteriors(enc_out);

        let mut binds = Bindings::new();
        store.bind(&mut binds, "");
        binds.set("audio", audio_input(4, 10));
        binds.set("video", video_input(4, 8));
        let eval = evaluate(&g, &binds).unwrap();
        assert_eq!(eval.value(f_a).shape(), &[4, 8]);
        assert_eq!(eval.value(f_v).shape(), &[4, 8]);
        assert_eq!(eval.value(fused).shape(), &[4, 8]);
        assert_eq!(eval.value(enc_out).shape(), &[4, 8]);
        assert_eq!(eval.value(targets).shape(), &[4, 8]);
        assert_eq!(eval.value(logits).shape(), &[3, 4]);
        assert_eq!(eval.value(ctc).shape(), &[4, 4]);
        // CTC posteriors are row-normalized.
        for i in 0..4 {
            let s: f64 = eval.value(ctc).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        // Changing a later input token must not affect earlier logits.
        let dims = tiny_dims();
        let store = tiny_stores(&dims);
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let mut b = NetBuilder::new(&mut g, &dims);
            let audio = b.g.data_input("audio");
            let f_a = b.audio_frontend(audio);
            let fused = b.fusion(f_a, f_a);
            let (enc_out, _) = b.encoder(fused, "", true);
            let logits = b.decoder_logits(enc_out, ids);
            let mut binds = Bindings::new();
            store.bind(&mut binds, "");
            binds.set("audio", audio_input(3, 10));
            let eval = evaluate(&g, &binds).unwrap();
            eval.value(logits).clone()
        };
        let a = run(&[3, 0, 1]);
        let b = run(&[3, 0, 2]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn teacher_prefix_params_are_untrainable() {
        let dims = tiny_dims();
        let store = tiny_stores(&dims);
        let mut g = Graph::new();
        let mut b = NetBuilder::new(&mut g, &dims);
        let audio = b.g.data_input("audio");
        let f_a = b.audio_frontend(audio);
        let fused = b.fusion(f_a, f_a);
        let (_, t_blocks) = b.encoder(fused, "tch.", false);
        let (y, _) = b.teacher_targets(&t_blocks, 1);
        let sq = g.mul(y, y);
        let loss = g.sum_all(sq);

        let mut binds = Bindings::new();
        store.bind(&mut binds, "");
        store.subset("enc.").bind(&mut binds, "tch.");
        binds.set("audio", audio_input(3, 10));
        let (_, grads) = crate::autodiff::gradient(&g, &binds, loss).unwrap();
        assert!(grads.params().keys().all(|k| !k.starts_with("tch.")));
        // Stop-gradient upstream of the loss: nothing is trainable here.
        assert!(grads.params().values().all(|g| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn decoder_ce_gradient_matches_fd() {
        let dims = tiny_dims();
        let store = tiny_stores(&dims);
        let mut g = Graph::new();
        let mut b = NetBuilder::new(&mut g, &dims);
        let audio = b.g.data_input("audio");
        let f_a = b.audio_frontend(audio);
        let fused = b.fusion(f_a, f_a);
        let (enc_out, _) = b.encoder(fused, "", true);
        let logits = b.decoder_logits(enc_out, &[3, 0]);
        let logp = g.log_softmax(logits);
        let picked = g.pick_per_row(logp, vec![0, 3]);
        let sum = g.sum_all(picked);
        let loss = g.scale(sum, -0.5);

        let mut binds = Bindings::new();
        store.bind(&mut binds, "");
        binds.set("audio", audio_input(3, 10));
        oracle::assert_grads_match_fd(&g, &binds, loss, 1e-4);
    }
}
