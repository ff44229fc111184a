use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{self, NormCache};
use super::params::{EncoderModel, LayerSlots, Layout};
use super::EncoderError;
use crate::tokenizer::{MaskedBatch, TokenSequence};

/// Gradient buffer sharing the model's [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [f64]> {
        layout.find(name).map(|s| &self.data[s.range()])
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Supervision for [`loss_and_grad`]. At least one part must be present.
#[derive(Clone, Copy, Debug, Default)]
pub struct Targets<'a> {
    /// Class index per sequence.
    pub classes: Option<&'a [usize]>,
    /// Original token id per position, `None` where nothing is predicted.
    pub mlm: Option<&'a [Vec<Option<u32>>]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean cross-entropy over sequences.
    pub classification: Option<f64>,
    /// Mean cross-entropy over masked positions.
    pub mlm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `batch × num_classes`.
    pub logits: Array2<f64>,
    /// Final hidden states per sequence (`len × hidden`); rows at positions
    /// with `attention_mask = 0` are zero.
    pub hidden: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct MlmOutput {
    /// One vocabulary-sized row per masked position.
    pub logits: Array2<f64>,
    /// (sequence, position) of each row.
    pub positions: Vec<(usize, usize)>,
    pub targets: Vec<u32>,
    pub loss: f64,
}

/// Unmasked positions of one sequence, with their original position ids.
struct Packed {
    ids: Vec<usize>,
    segments: Vec<usize>,
    positions: Vec<usize>,
}

impl Packed {
    fn new(seq: &TokenSequence) -> Self {
        let mut p = Packed {
            ids: Vec::new(),
            segments: Vec::new(),
            positions: Vec::new(),
        };
        for (i, &m) in seq.attention_mask.iter().enumerate() {
            if m != 0 {
                p.ids.push(seq.ids[i] as usize);
                p.segments.push(seq.segment_ids[i] as usize);
                p.positions.push(i);
            }
        }
        p
    }

    fn row_of(&self, position: usize) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }
}

struct Dropout {
    keep: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    fn new(rate: f64, seed: Option<u64>, stream: usize) -> Option<Self> {
        let seed = seed?;
        if rate <= 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        Some(Dropout { keep: 1.0 - rate, rng })
    }

    fn mask(this: &mut Option<Self>, rows: usize, cols: usize) -> Option<Array2<f64>> {
        let d = this.as_mut()?;
        let scale = 1.0 / d.keep;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if d.rng.random::<f64>() < d.keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

fn apply(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_norm: NormCache,
    mid: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ffn_norm: NormCache,
}

struct SeqCache {
    emb_norm: NormCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    hidden: Array2<f64>,
}

struct HeadCache {
    pooled: Array1<f64>,
    pool_drop: Option<Array1<f64>>,
    logits: Array1<f64>,
}

struct MlmCache {
    rows: Vec<usize>,
    input: Array2<f64>,
    pre_act: Array2<f64>,
    norm: NormCache,
    normed: Array2<f64>,
    logits: Array2<f64>,
}

fn encode_layer(model: &EncoderModel, ls: &LayerSlots, input: Array2<f64>, drop: &mut Option<Dropout>) -> LayerCache {
    let (n, h) = input.dim();
    let d = model.config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let q = linear(input.view(), model.m(ls.query_w), model.v(ls.query_b));
    let k = linear(input.view(), model.m(ls.key_w), model.v(ls.key_b));
    let v = linear(input.view(), model.m(ls.value_w), model.v(ls.value_b));
    let mut context = Array2::zeros((n, h));
    let mut probs = Vec::with_capacity(model.config.num_heads);
    for head in 0..model.config.num_heads {
        let cols = s![.., head * d..(head + 1) * d];
        let p = ops::softmax_rows(q.slice(cols).dot(&k.slice(cols).t()) * scale);
        context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let attn_drop = Dropout::mask(drop, n, h);
    let attn = apply(linear(context.view(), model.m(ls.out_w), model.v(ls.out_b)), &attn_drop);
    let (mid, attn_norm) = ops::layer_norm(
        (&input + &attn).view(),
        model.v(ls.attn_norm_g),
        model.v(ls.attn_norm_b),
    );
    let pre_act = linear(mid.view(), model.m(ls.ffn_in_w), model.v(ls.ffn_in_b));
    let act = pre_act.mapv(ops::gelu);
    let ffn_drop = Dropout::mask(drop, n, h);
    let z = apply(
        linear(act.view(), model.m(ls.ffn_out_w), model.v(ls.ffn_out_b)),
        &ffn_drop,
    );
    let (_, ffn_norm) = ops::layer_norm((&mid + &z).view(), model.v(ls.ffn_norm_g), model.v(ls.ffn_norm_b));
    LayerCache {
        input,
        q,
        k,
        v,
        probs,
        context,
        attn_drop,
        attn_norm,
        mid,
        pre_act,
        act,
        ffn_drop,
        ffn_norm,
    }
}

fn layer_output(model: &EncoderModel, ls: &LayerSlots, c: &LayerCache) -> Array2<f64> {
    &c.ffn_norm.xhat * &model.v(ls.ffn_norm_g) + model.v(ls.ffn_norm_b)
}

fn encode_packed(model: &EncoderModel, p: &Packed, drop: &mut Option<Dropout>) -> SeqCache {
    let sl = &model.layout().slots;
    let (tok, pos, seg) = (model.m(sl.token), model.m(sl.position), model.m(sl.segment));
    let n = p.ids.len();
    let h = model.config.hidden_size;
    let mut emb = Array2::zeros((n, h));
    for (r, mut row) in emb.rows_mut().into_iter().enumerate() {
        row += &tok.row(p.ids[r]);
        row += &pos.row(p.positions[r]);
        row += &seg.row(p.segments[r]);
    }
    let (x, emb_norm) = ops::layer_norm(emb.view(), model.v(sl.emb_norm_g), model.v(sl.emb_norm_b));
    let emb_drop = Dropout::mask(drop, n, h);
    let mut x = apply(x, &emb_drop);
    let mut layers = Vec::with_capacity(sl.layers.len());
    for ls in &sl.layers {
        let cache = encode_layer(model, ls, x, drop);
        x = layer_output(model, ls, &cache);
        layers.push(cache);
    }
    SeqCache {
        emb_norm,
        emb_drop,
        layers,
        hidden: x,
    }
}

fn classify(model: &EncoderModel, hidden: &Array2<f64>, drop: &mut Option<Dropout>) -> HeadCache {
    let sl = &model.layout().slots;
    let cls = hidden.row(0);
    let pooled = (cls.dot(&model.m(sl.pooler_w)) + model.v(sl.pooler_b)).mapv(f64::tanh);
    let pool_drop = Dropout::mask(drop, 1, pooled.len()).map(|m| m.row(0).to_owned());
    let used = match &pool_drop {
        Some(m) => &pooled * m,
        None => pooled.clone(),
    };
    let logits = used.dot(&model.m(sl.classifier_w)) + model.v(sl.classifier_b);
    HeadCache {
        pooled,
        pool_drop,
        logits,
    }
}

fn mlm_head(model: &EncoderModel, hidden: &Array2<f64>, rows: Vec<usize>) -> Result<MlmCache, EncoderError> {
    let ms = model.layout().slots.mlm.as_ref().ok_or(EncoderError::NoMlmHead)?;
    let input = hidden.select(Axis(0), &rows);
    let pre_act = linear(input.view(), model.m(ms.transform_w), model.v(ms.transform_b));
    let (normed, norm) = ops::layer_norm(pre_act.mapv(ops::gelu).view(), model.v(ms.norm_g), model.v(ms.norm_b));
    let logits = linear(normed.view(), model.m(ms.decoder_w), model.v(ms.decoder_b));
    Ok(MlmCache {
        rows,
        input,
        pre_act,
        norm,
        normed,
        logits,
    })
}

struct Acc<'a> {
    layout: &'a Layout,
    data: Vec<f64>,
}

impl Acc<'_> {
    fn mat(&mut self, slot: usize, d: &Array2<f64>) {
        let mut v = self.layout.view_mut(&mut self.data, slot);
        v += d;
    }

    fn vec(&mut self, slot: usize, d: &Array1<f64>) {
        let mut v = self.layout.view1_mut(&mut self.data, slot);
        v += d;
    }

    fn outer(&mut self, slot: usize, a: ArrayView1<f64>, b: ArrayView1<f64>) {
        let mut v = self.layout.view_mut(&mut self.data, slot);
        for (mut row, &ai) in v.rows_mut().into_iter().zip(a.iter()) {
            row.scaled_add(ai, &b);
        }
    }

    fn row(&mut self, slot: usize, r: usize, d: ArrayView1<f64>) {
        let mut v = self.layout.view_mut(&mut self.data, slot);
        let mut row = v.row_mut(r);
        row += &d;
    }

    /// Backward of `y = x·W + b`; returns `dx`.
    fn linear(
        &mut self,
        model: &EncoderModel,
        w: usize,
        b: usize,
        x: ArrayView2<f64>,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        self.mat(w, &x.t().dot(dy));
        self.vec(b, &dy.sum_axis(Axis(0)));
        dy.dot(&model.m(w).t())
    }

    fn norm(&mut self, model: &EncoderModel, g: usize, b: usize, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
        let (dx, dg, db) = ops::layer_norm_backward(dy.view(), cache, model.v(g));
        self.vec(g, &dg);
        self.vec(b, &db);
        dx
    }
}

fn backward_layer(
    model: &EncoderModel,
    ls: &LayerSlots,
    c: &LayerCache,
    dout: &Array2<f64>,
    acc: &mut Acc,
) -> Array2<f64> {
    let d = model.config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let dsum2 = acc.norm(model, ls.ffn_norm_g, ls.ffn_norm_b, &c.ffn_norm, dout);
    let dz = apply(dsum2.clone(), &c.ffn_drop);
    let mut dmid = dsum2;
    let dact = acc.linear(model, ls.ffn_out_w, ls.ffn_out_b, c.act.view(), &dz);
    let dpre = dact * &c.pre_act.mapv(ops::gelu_grad);
    dmid += &acc.linear(model, ls.ffn_in_w, ls.ffn_in_b, c.mid.view(), &dpre);

    let dsum1 = acc.norm(model, ls.attn_norm_g, ls.attn_norm_b, &c.attn_norm, &dmid);
    let dattn = apply(dsum1.clone(), &c.attn_drop);
    let mut dx = dsum1;
    let dcontext = acc.linear(model, ls.out_w, ls.out_b, c.context.view(), &dattn);

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (head, p) in c.probs.iter().enumerate() {
        let cols = s![.., head * d..(head + 1) * d];
        let dctx = dcontext.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dctx));
        let dp = dctx.dot(&c.v.slice(cols).t());
        let ds = ops::softmax_rows_backward(p.view(), dp.view()) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    dx += &acc.linear(model, ls.query_w, ls.query_b, c.input.view(), &dq);
    dx += &acc.linear(model, ls.key_w, ls.key_b, c.input.view(), &dk);
    dx += &acc.linear(model, ls.value_w, ls.value_b, c.input.view(), &dv);
    dx
}

fn backward_encoder(model: &EncoderModel, p: &Packed, cache: &SeqCache, dhidden: Array2<f64>, acc: &mut Acc) {
    let sl = &model.layout().slots;
    let mut dx = dhidden;
    for (ls, c) in sl.layers.iter().zip(&cache.layers).rev() {
        dx = backward_layer(model, ls, c, &dx, acc);
    }
    let dnorm = apply(dx, &cache.emb_drop);
    let demb = acc.norm(model, sl.emb_norm_g, sl.emb_norm_b, &cache.emb_norm, &dnorm);
    for (r, row) in demb.rows().into_iter().enumerate() {
        acc.row(sl.token, p.ids[r], row);
        acc.row(sl.position, p.positions[r], row);
        acc.row(sl.segment, p.segments[r], row);
    }
}

struct SeqResult {
    class_loss: f64,
    mlm_loss: f64,
    grads: Vec<f64>,
}

fn seq_loss_grad(
    model: &EncoderModel,
    seq: &TokenSequence,
    stream: usize,
    class: Option<(usize, f64)>,
    mlm: Option<(&[Option<u32>], f64)>,
    dropout_seed: Option<u64>,
) -> Result<SeqResult, EncoderError> {
    let layout = model.layout();
    let sl = &layout.slots;
    let packed = Packed::new(seq);
    let mut drop = Dropout::new(model.config.dropout_rate, dropout_seed, stream);
    let cache = encode_packed(model, &packed, &mut drop);
    let mut acc = Acc {
        layout,
        data: vec![0.0; layout.total()],
    };
    let mut dhidden = Array2::zeros(cache.hidden.raw_dim());
    let mut class_loss = 0.0;
    let mut mlm_loss = 0.0;

    if let Some((target, weight)) = class {
        let head = classify(model, &cache.hidden, &mut drop);
        let (loss, dlogits) = ops::cross_entropy(head.logits.view(), target);
        class_loss = loss;
        let dlogits = dlogits * weight;
        let used = match &head.pool_drop {
            Some(m) => &head.pooled * m,
            None => head.pooled.clone(),
        };
        acc.outer(sl.classifier_w, used.view(), dlogits.view());
        acc.vec(sl.classifier_b, &dlogits);
        let mut dpooled = model.m(sl.classifier_w).dot(&dlogits);
        if let Some(m) = &head.pool_drop {
            dpooled *= m;
        }
        let dpre = dpooled * &head.pooled.mapv(|t| 1.0 - t * t);
        acc.outer(sl.pooler_w, cache.hidden.row(0), dpre.view());
        acc.vec(sl.pooler_b, &dpre);
        let mut row0 = dhidden.row_mut(0);
        row0 += &model.m(sl.pooler_w).dot(&dpre);
    }

    if let Some((labels, weight)) = mlm {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (pos, label) in labels.iter().enumerate() {
            if let Some(t) = label {
                rows.push(packed.row_of(pos).ok_or_else(|| mlm_on_padding(pos))?);
                targets.push(*t as usize);
            }
        }
        if !rows.is_empty() {
            let ms = sl.mlm.as_ref().ok_or(EncoderError::NoMlmHead)?;
            let mc = mlm_head(model, &cache.hidden, rows)?;
            let mut dlogits = Array2::zeros(mc.logits.raw_dim());
            for (r, &t) in targets.iter().enumerate() {
                let (loss, g) = ops::cross_entropy(mc.logits.row(r), t);
                mlm_loss += loss;
                dlogits.row_mut(r).assign(&(g * weight));
            }
            let dnormed = acc.linear(model, ms.decoder_w, ms.decoder_b, mc.normed.view(), &dlogits);
            let dact = acc.norm(model, ms.norm_g, ms.norm_b, &mc.norm, &dnormed);
            let dpre = dact * &mc.pre_act.mapv(ops::gelu_grad);
            let dinput = acc.linear(model, ms.transform_w, ms.transform_b, mc.input.view(), &dpre);
            for (r, &row) in mc.rows.iter().enumerate() {
                let mut target = dhidden.row_mut(row);
                target += &dinput.row(r);
            }
        }
    }

    backward_encoder(model, &packed, &cache, dhidden, &mut acc);
    Ok(SeqResult {
        class_loss,
        mlm_loss,
        grads: acc.data,
    })
}

fn mlm_on_padding(pos: usize) -> EncoderError {
    EncoderError::Mismatch(format!("MLM target at padded position {pos}"))
}

pub(crate) fn validate_sequence(model: &EncoderModel, seq: &TokenSequence) -> Result<(), EncoderError> {
    let cfg = &model.config;
    let n = seq.ids.len();
    if seq.segment_ids.len() != n || seq.attention_mask.len() != n {
        return Err(EncoderError::Mismatch(format!(
            "sequence fields differ in length ({n}, {}, {})",
            seq.segment_ids.len(),
            seq.attention_mask.len()
        )));
    }
    if n > cfg.max_len {
        return Err(EncoderError::SequenceLength {
            len: n,
            max: cfg.max_len,
        });
    }
    if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(EncoderError::VocabId {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if let Some(&s) = seq.segment_ids.iter().find(|&&s| s > 1) {
        return Err(EncoderError::SegmentId(s));
    }
    if !seq.attention_mask.iter().any(|&m| m != 0) {
        return Err(EncoderError::AllMasked);
    }
    Ok(())
}

fn validate_batch(model: &EncoderModel, batch: &[TokenSequence], equal: bool) -> Result<(), EncoderError> {
    let first = batch.first().ok_or(EncoderError::EmptyBatch)?;
    for seq in batch {
        if equal && seq.len() != first.len() {
            return Err(EncoderError::UnequalLengths(first.len(), seq.len()));
        }
        validate_sequence(model, seq)?;
    }
    Ok(())
}

/// Inference-mode logits for sequences of any (valid) length.
pub(crate) fn class_logits(model: &EncoderModel, batch: &[TokenSequence]) -> Result<Array2<f64>, EncoderError> {
    validate_batch(model, batch, false)?;
    let rows: Vec<Array1<f64>> = batch
        .par_iter()
        .map(|seq| {
            let cache = encode_packed(model, &Packed::new(seq), &mut None);
            classify(model, &cache.hidden, &mut None).logits
        })
        .collect();
    let mut out = Array2::zeros((batch.len(), model.config.num_classes));
    for (mut dst, row) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&row);
    }
    Ok(out)
}

/// Inference-mode classification logits and final hidden states. Padded
/// positions never influence unmasked ones.
pub fn forward(model: &EncoderModel, batch: &[TokenSequence]) -> Result<ForwardOutput, EncoderError> {
    validate_batch(model, batch, true)?;
    let results: Vec<(Array1<f64>, Array2<f64>)> = batch
        .par_iter()
        .map(|seq| {
            let packed = Packed::new(seq);
            let cache = encode_packed(model, &packed, &mut None);
            let logits = classify(model, &cache.hidden, &mut None).logits;
            let mut hidden = Array2::zeros((seq.len(), model.config.hidden_size));
            for (r, &pos) in packed.positions.iter().enumerate() {
                hidden.row_mut(pos).assign(&cache.hidden.row(r));
            }
            (logits, hidden)
        })
        .collect();
    let mut logits = Array2::zeros((batch.len(), model.config.num_classes));
    let mut hidden = Vec::with_capacity(batch.len());
    for (i, (l, h)) in results.into_iter().enumerate() {
        logits.row_mut(i).assign(&l);
        hidden.push(h);
    }
    Ok(ForwardOutput { logits, hidden })
}

fn check_mlm_labels(
    model: &EncoderModel,
    batch: &[TokenSequence],
    labels: &[Vec<Option<u32>>],
) -> Result<usize, EncoderError> {
    if labels.len() != batch.len() {
        return Err(EncoderError::Mismatch(format!(
            "{} MLM label rows for {} sequences",
            labels.len(),
            batch.len()
        )));
    }
    let mut total = 0;
    for (seq, row) in batch.iter().zip(labels) {
        if row.len() != seq.len() {
            return Err(EncoderError::Mismatch(format!(
                "MLM label row of length {} for a sequence of length {}",
                row.len(),
                seq.len()
            )));
        }
        for (pos, label) in row.iter().enumerate() {
            if let Some(id) = *label {
                if id as usize >= model.config.vocab_size {
                    return Err(EncoderError::VocabId {
                        id,
                        vocab_size: model.config.vocab_size,
                    });
                }
                if seq.attention_mask[pos] == 0 {
                    return Err(mlm_on_padding(pos));
                }
                total += 1;
            }
        }
    }
    Ok(total)
}

/// Vocabulary logits at every masked position and their mean cross-entropy.
/// MLM logits of one sequence with the positions they belong to.
type MlmRows = (Array2<f64>, Vec<usize>);

pub fn mlm_forward(model: &EncoderModel, masked: &MaskedBatch) -> Result<MlmOutput, EncoderError> {
    if model.layout().slots.mlm.is_none() {
        return Err(EncoderError::NoMlmHead);
    }
    validate_batch(model, &masked.inputs, false)?;
    if check_mlm_labels(model, &masked.inputs, &masked.labels)? == 0 {
        return Err(EncoderError::NoMaskedPositions);
    }
    let parts: Vec<Result<MlmRows, EncoderError>> = masked
        .inputs
        .par_iter()
        .zip(masked.labels.par_iter())
        .map(|(seq, labels)| {
            let packed = Packed::new(seq);
            let positions: Vec<usize> = (0..labels.len()).filter(|&p| labels[p].is_some()).collect();
            if positions.is_empty() {
                return Ok((Array2::zeros((0, model.config.vocab_size)), positions));
            }
            let rows = positions
                .iter()
                .map(|&p| packed.row_of(p).ok_or_else(|| mlm_on_padding(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let cache = encode_packed(model, &packed, &mut None);
            Ok((mlm_head(model, &cache.hidden, rows)?.logits, positions))
        })
        .collect();
    let mut blocks = Vec::new();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, part) in parts.into_iter().enumerate() {
        let (logits, pos) = part?;
        for &p in &pos {
            positions.push((i, p));
            targets.push(masked.labels[i][p].expect("selected above"));
        }
        blocks.push(logits);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let logits = ndarray::concatenate(Axis(0), &views).expect("uniform width");
    let loss = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| ops::cross_entropy(logits.row(r), t as usize).0)
        .sum::<f64>()
        / targets.len() as f64;
    Ok(MlmOutput {
        logits,
        positions,
        targets,
        loss,
    })
}

/// Loss and full gradient of the (classification and/or MLM) objective.
/// Dropout is active only when `dropout_seed` is given; per-sequence
/// gradients are summed in batch order, so the result does not depend on
/// the thread count.
pub fn loss_and_grad(
    model: &EncoderModel,
    batch: &[TokenSequence],
    targets: &Targets,
    dropout_seed: Option<u64>,
) -> Result<(LossParts, Gradients), EncoderError> {
    validate_batch(model, batch, false)?;
    if targets.classes.is_none() && targets.mlm.is_none() {
        return Err(EncoderError::Mismatch("no training targets".into()));
    }
    if let Some(classes) = targets.classes {
        if classes.len() != batch.len() {
            return Err(EncoderError::Mismatch(format!(
                "{} class targets for {} sequences",
                classes.len(),
                batch.len()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= model.config.num_classes) {
            return Err(EncoderError::Mismatch(format!(
                "class index {c} with only {} classes",
                model.config.num_classes
            )));
        }
    }
    let masked_total = match targets.mlm {
        Some(labels) => {
            if model.layout().slots.mlm.is_none() {
                return Err(EncoderError::NoMlmHead);
            }
            match check_mlm_labels(model, batch, labels)? {
                0 => return Err(EncoderError::NoMaskedPositions),
                n => n,
            }
        }
        None => 0,
    };
    let class_weight = 1.0 / batch.len() as f64;
    let mlm_weight = if masked_total > 0 {
        1.0 / masked_total as f64
    } else {
        0.0
    };
    let results: Vec<Result<SeqResult, EncoderError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let class = targets.classes.map(|c| (c[i], class_weight));
            let mlm = targets.mlm.map(|m| (m[i].as_slice(), mlm_weight));
            seq_loss_grad(model, seq, i, class, mlm, dropout_seed)
        })
        .collect();
    let mut grads = Gradients::zeros(model.layout().total());
    let (mut class_sum, mut mlm_sum) = (0.0, 0.0);
    for r in results {
        let r = r?;
        class_sum += r.class_loss;
        mlm_sum += r.mlm_loss;
        for (g, d) in grads.data.iter_mut().zip(&r.grads) {
            *g += d;
        }
    }
    let classification = targets.classes.map(|_| class_sum * class_weight);
    let mlm = targets.mlm.map(|_| mlm_sum * mlm_weight);
    let total = classification.unwrap_or(0.0) + mlm.unwrap_or(0.0);
    Ok((
        LossParts {
            total,
            classification,
            mlm,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::apply_mlm_mask;

    fn cfg(vocab: usize, classes: usize) -> EncoderConfig {
        EncoderConfig {
            dropout_rate: 0.0,
            max_len: 16,
            ..EncoderConfig::desk(vocab, classes)
        }
    }

    fn seq(ids: &[u32], len: usize) -> TokenSequence {
        let mut s = TokenSequence {
            ids: ids.to_vec(),
            segment_ids: vec![0; ids.len()],
            attention_mask: vec![1; ids.len()],
            special_positions: vec![0, ids.len() - 1],
        };
        s.ids.resize(len, 0);
        s.segment_ids.resize(len, 0);
        s.attention_mask.resize(len, 0);
        s
    }

    fn random_batch(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let real = rng.random_range(3..=len);
                let mut ids = vec![2u32];
                ids.extend((0..real - 2).map(|_| rng.random_range(5..vocab)));
                ids.push(3);
                seq(&ids, len)
            })
            .collect()
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let m = EncoderModel::init(&cfg(40, 3)).unwrap();
        let out = forward(&m, &random_batch(5, 10, 40, 1)).unwrap();
        assert_eq!(out.logits.dim(), (5, 3));
        assert_eq!(out.hidden.len(), 5);
        assert_eq!(out.hidden[0].dim(), (10, 64));
    }

    #[test]
    fn padding_ids_do_not_change_logits() {
        let m = EncoderModel::init(&cfg(40, 3)).unwrap();
        let batch = random_batch(4, 12, 40, 2);
        let mut altered = batch.clone();
        for s in &mut altered {
            for i in 0..s.len() {
                if s.attention_mask[i] == 0 {
                    s.ids[i] = 7 + i as u32;
                    s.segment_ids[i] = 1;
                }
            }
        }
        let a = forward(&m, &batch).unwrap();
        let b = forward(&m, &altered).unwrap();
        assert_eq!(a.logits, b.logits);
        // Extra padding is also invisible.
        let longer: Vec<_> = batch
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.ids.resize(16, 0);
                t.segment_ids.resize(16, 0);
                t.attention_mask.resize(16, 0);
                t
            })
            .collect();
        assert_eq!(forward(&m, &longer).unwrap().logits, a.logits);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = EncoderModel::init(&cfg(40, 3)).unwrap();
        let batch = random_batch(6, 10, 40, 3);
        assert_eq!(forward(&m, &batch).unwrap().logits, forward(&m, &batch).unwrap().logits);
        let again = EncoderModel::init(&cfg(40, 3)).unwrap();
        assert_eq!(
            forward(&m, &batch).unwrap().logits,
            forward(&again, &batch).unwrap().logits
        );
    }

    #[test]
    fn forward_validates_inputs() {
        let m = EncoderModel::init(&cfg(40, 3)).unwrap();
        let too_long = seq(&[2, 5, 3], 17);
        assert!(matches!(
            forward(&m, &[too_long]),
            Err(EncoderError::SequenceLength { len: 17, max: 16 })
        ));
        assert!(matches!(
            forward(&m, &[seq(&[2, 40, 3], 5)]),
            Err(EncoderError::VocabId { id: 40, .. })
        ));
        assert!(matches!(
            forward(&m, &[seq(&[2, 5, 3], 5), seq(&[2, 5, 3], 6)]),
            Err(EncoderError::UnequalLengths(5, 6))
        ));
        assert!(matches!(forward(&m, &[]), Err(EncoderError::EmptyBatch)));
    }

    #[test]
    fn initial_mlm_loss_is_near_log_vocab() {
        for seed in 0..4 {
            let vocab = 300;
            let m = EncoderModel::init(&EncoderConfig {
                seed,
                mlm_head: true,
                ..cfg(vocab, 2)
            })
            .unwrap();
            let batch = random_batch(20, 14, vocab as u32, seed + 10);
            let masked = apply_mlm_mask(&batch, 0.3, seed);
            let out = mlm_forward(&m, &masked).unwrap();
            let expected = (vocab as f64).ln();
            assert!(
                (out.loss - expected).abs() / expected < 0.15,
                "loss {} vs {expected}",
                out.loss
            );
            assert_eq!(out.logits.nrows(), masked.num_masked());
        }
    }

    #[test]
    fn saturated_mlm_margin_gives_tiny_loss() {
        let mut m = EncoderModel::init(&EncoderConfig {
            mlm_head: true,
            ..cfg(50, 2)
        })
        .unwrap();
        let layout = m.layout().clone();
        let ms = layout.slots.mlm.clone().unwrap();
        layout.view_mut(m.params_mut(), ms.decoder_w).fill(0.0);
        let mut bias = layout.view1_mut(m.params_mut(), ms.decoder_b);
        bias.fill(0.0);
        bias[9] = 30.0;
        let masked = MaskedBatch {
            inputs: vec![seq(&[2, 4, 3], 3)],
            labels: vec![vec![None, Some(9), None]],
        };
        let out = mlm_forward(&m, &masked).unwrap();
        assert!(out.loss < 1e-9, "{}", out.loss);
    }

    #[test]
    fn mlm_requires_head_and_positions() {
        let plain = EncoderModel::init(&cfg(50, 2)).unwrap();
        let masked = MaskedBatch {
            inputs: vec![seq(&[2, 4, 3], 3)],
            labels: vec![vec![None, Some(9), None]],
        };
        assert!(matches!(mlm_forward(&plain, &masked), Err(EncoderError::NoMlmHead)));
        let with_head = EncoderModel::init(&EncoderConfig {
            mlm_head: true,
            ..cfg(50, 2)
        })
        .unwrap();
        let none = MaskedBatch {
            inputs: masked.inputs.clone(),
            labels: vec![vec![None; 3]],
        };
        assert!(matches!(
            mlm_forward(&with_head, &none),
            Err(EncoderError::NoMaskedPositions)
        ));
    }

    #[test]
    fn gradients_are_thread_count_independent() {
        let m = EncoderModel::init(&EncoderConfig {
            dropout_rate: 0.1,
            ..cfg(40, 3)
        })
        .unwrap();
        let batch = random_batch(8, 10, 40, 4);
        let classes = [0, 1, 2, 0, 1, 2, 0, 1];
        let t = Targets {
            classes: Some(&classes),
            mlm: None,
        };
        let (la, ga) = loss_and_grad(&m, &batch, &t, Some(5)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (lb, gb) = pool.install(|| loss_and_grad(&m, &batch, &t, Some(5))).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        let (lc, _) = loss_and_grad(&m, &batch, &t, Some(6)).unwrap();
        assert_ne!(la.total, lc.total);
    }

    #[test]
    fn inference_loss_matches_forward_logits() {
        let m = EncoderModel::init(&cfg(40, 3)).unwrap();
        let batch = random_batch(5, 9, 40, 8);
        let classes = [2, 0, 1, 1, 0];
        let (loss, _) = loss_and_grad(
            &m,
            &batch,
            &Targets {
                classes: Some(&classes),
                mlm: None,
            },
            None,
        )
        .unwrap();
        let logits = forward(&m, &batch).unwrap().logits;
        let oracle: f64 = (0..5)
            .map(|i| {
                let row = logits.row(i);
                let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
                lse - row[classes[i]]
            })
            .sum::<f64>()
            / 5.0;
        assert!((loss.total - oracle).abs() < 1e-12);
    }
}
