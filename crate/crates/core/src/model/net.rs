//! Forward and backward passes through encoder, fusion, relation and
//! decoder.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, NdFloat};

use super::ops::{
    concat_channels, conv1x1_backward, conv1x1_forward, conv3x3_backward, conv3x3_forward,
    maxpool2_backward, maxpool2_forward, split_channels, upsample2_backward, upsample2_forward,
    ConvCache, PointwiseCache,
};
use super::{ModelConfig, ModelError, ModelParams, ParamSet, ResolvedModel, IN_CHANNELS, LOGIT_CLAMP};

fn view4<'a, F: NdFloat>(
    set: &'a ParamSet<F>,
    name: &str,
) -> Result<ArrayView4<'a, F>, ModelError> {
    set.get(name)?
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| ModelError::ShapeMismatch {
            what: "weight rank",
            expected: "4-d".into(),
            got: name.to_string(),
        })
}

fn view2<'a, F: NdFloat>(
    set: &'a ParamSet<F>,
    name: &str,
) -> Result<ArrayView2<'a, F>, ModelError> {
    set.get(name)?
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| ModelError::ShapeMismatch {
            what: "weight rank",
            expected: "2-d".into(),
            got: name.to_string(),
        })
}

fn view1<'a, F: NdFloat>(
    set: &'a ParamSet<F>,
    name: &str,
) -> Result<ArrayView1<'a, F>, ModelError> {
    set.get(name)?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| ModelError::ShapeMismatch {
            what: "bias rank",
            expected: "1-d".into(),
            got: name.to_string(),
        })
}

fn accumulate<F: NdFloat>(
    set: &mut ParamSet<F>,
    name: &str,
    delta: ndarray::ArrayD<F>,
) -> Result<(), ModelError> {
    let slot = set.get_mut(name)?;
    *slot += &delta;
    Ok(())
}

// ---------------------------------------------------------------------------
// encoder

#[derive(Debug, Clone)]
pub struct StageTrace<F> {
    pool_argmax: Array3<u8>,
    pool_in_dim: (usize, usize, usize),
    convs: Vec<ConvCache<F>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<F> {
    stages: Vec<StageTrace<F>>,
}

impl<F: NdFloat> EncoderTrace<F> {
    pub fn stage_output(&self, stage: usize) -> &Array3<F> {
        &self.stages[stage].convs.last().expect("convs").out
    }
}

/// Per-stage feature maps for one 4-channel input; stage `i` halves the
/// resolution before its convolutions, so its map is `side / 2^(i+1)`.
pub fn encode<F: NdFloat>(
    encoder: &ParamSet<F>,
    resolved: &ResolvedModel,
    input: &Array3<F>,
) -> Result<EncoderTrace<F>, ModelError> {
    let expected = (IN_CHANNELS, resolved.input_size, resolved.input_size);
    if input.dim() != expected {
        return Err(ModelError::ShapeMismatch {
            what: "encoder input",
            expected: format!("{expected:?}"),
            got: format!("{:?}", input.dim()),
        });
    }

    let mut stages = Vec::with_capacity(resolved.n_stages);
    let mut current = input.clone();
    for stage in 0..resolved.n_stages {
        let pool_in_dim = current.dim();
        let (pooled, argmax) = maxpool2_forward(&current);
        let mut convs = Vec::with_capacity(resolved.convs_per_stage);
        let mut x = pooled;
        for conv in 0..resolved.convs_per_stage {
            let w = view4(encoder, &format!("stage{stage}.conv{conv}.weight"))?;
            let b = view1(encoder, &format!("stage{stage}.conv{conv}.bias"))?;
            let cache = conv3x3_forward(w, b, &x, true);
            x = cache.out.clone();
            convs.push(cache);
        }
        stages.push(StageTrace {
            pool_argmax: argmax,
            pool_in_dim,
            convs,
        });
        current = x;
    }
    Ok(EncoderTrace { stages })
}

/// Backward through the encoder for one input. `stage_grads[i]` carries
/// the gradient arriving at stage `i`'s output from its consumers (next
/// stage flow is handled internally). Parameter gradients accumulate into
/// `grads`; the input gradient is discarded (inputs are data).
fn encode_backward<F: NdFloat>(
    encoder: &ParamSet<F>,
    trace: &EncoderTrace<F>,
    mut stage_grads: Vec<Array3<F>>,
    grads: &mut ParamSet<F>,
) -> Result<(), ModelError> {
    let n = trace.stages.len();
    debug_assert_eq!(stage_grads.len(), n);
    let mut d = stage_grads.pop().expect("n >= 1");
    for stage in (0..n).rev() {
        let st = &trace.stages[stage];
        for conv in (0..st.convs.len()).rev() {
            let cache = &st.convs[conv];
            if stage == 0 && conv == 0 {
                // the remaining gradient would flow to the raw image;
                // only the parameter gradients matter here
                let (dw, db) = super::ops::conv3x3_backward_params_only(cache, &d, true);
                accumulate(grads, "stage0.conv0.weight", dw.into_dyn())?;
                accumulate(grads, "stage0.conv0.bias", db.into_dyn())?;
                return Ok(());
            }
            let w = view4(encoder, &format!("stage{stage}.conv{conv}.weight"))?;
            let (dx, dw, db) = conv3x3_backward(w, cache, &d, true);
            accumulate(grads, &format!("stage{stage}.conv{conv}.weight"), dw.into_dyn())?;
            accumulate(grads, &format!("stage{stage}.conv{conv}.bias"), db.into_dyn())?;
            d = dx;
        }
        let d_input = maxpool2_backward(&d, &st.pool_argmax, st.pool_in_dim);
        if stage > 0 {
            d = stage_grads.pop().expect("one grad per stage");
            d += &d_input;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fusion

/// Element-wise mean of K equally-shaped maps.
///
/// Values are summed per element in a canonical (sorted) order around the
/// smallest element, so the result is bit-identical under any permutation
/// of the supports and collapses exactly when all K maps are equal.
pub fn fuse_stage<F: NdFloat>(maps: &[&Array3<F>]) -> Result<Array3<F>, ModelError> {
    let k = maps.len();
    if k == 0 {
        return Err(ModelError::NoSupports);
    }
    let dim = maps[0].dim();
    for m in maps {
        if m.dim() != dim {
            return Err(ModelError::ShapeMismatch {
                what: "fused support maps",
                expected: format!("{dim:?}"),
                got: format!("{:?}", m.dim()),
            });
        }
    }
    if k == 1 {
        return Ok(maps[0].clone());
    }
    let len = maps[0].len();
    let flats: Vec<&[F]> = maps
        .iter()
        .map(|m| m.as_slice().expect("standard layout"))
        .collect();
    let mut out = Array3::<F>::zeros(dim);
    let out_flat = out.as_slice_mut().expect("standard layout");
    let inv_k = F::one() / F::from(k).unwrap();
    let mut buf: Vec<F> = vec![F::zero(); k];
    for i in 0..len {
        for (j, f) in flats.iter().enumerate() {
            buf[j] = f[i];
        }
        buf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite feature values"));
        let anchor = buf[0];
        let mut acc = F::zero();
        for &v in &buf[1..] {
            acc = acc + (v - anchor);
        }
        out_flat[i] = anchor + acc * inv_k;
    }
    Ok(out)
}

/// Fuse K per-stage feature-map lists into one list of the same shape.
pub fn fuse_supports<F: NdFloat>(
    per_support: &[Vec<Array3<F>>],
) -> Result<Vec<Array3<F>>, ModelError> {
    if per_support.is_empty() {
        return Err(ModelError::NoSupports);
    }
    let n_stages = per_support[0].len();
    for list in per_support {
        if list.len() != n_stages {
            return Err(ModelError::ShapeMismatch {
                what: "support stage count",
                expected: n_stages.to_string(),
                got: list.len().to_string(),
            });
        }
    }
    (0..n_stages)
        .map(|s| {
            let maps: Vec<&Array3<F>> = per_support.iter().map(|list| &list[s]).collect();
            fuse_stage(&maps)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// relation

#[derive(Debug, Clone)]
pub struct RelationTrace<F> {
    reduce: PointwiseCache<F>,
    embed: PointwiseCache<F>,
}

impl<F: NdFloat> RelationTrace<F> {
    pub fn output(&self) -> &Array3<F> {
        &self.embed.out
    }
}

/// Channel-concatenate the fused-support and query deep maps, then embed
/// their relationship through two pointwise convolutions with ReLU.
/// Concatenation is ordered: swapping the arguments changes the result.
pub fn relate<F: NdFloat>(
    relation: &ParamSet<F>,
    fused_deep: &Array3<F>,
    query_deep: &Array3<F>,
) -> Result<RelationTrace<F>, ModelError> {
    if fused_deep.dim() != query_deep.dim() {
        return Err(ModelError::ShapeMismatch {
            what: "relation inputs",
            expected: format!("{:?}", fused_deep.dim()),
            got: format!("{:?}", query_deep.dim()),
        });
    }
    let combined = concat_channels(&[fused_deep, query_deep]);
    let reduce = conv1x1_forward(
        view2(relation, "reduce.weight")?,
        view1(relation, "reduce.bias")?,
        &combined,
        true,
    );
    let embed = conv1x1_forward(
        view2(relation, "embed.weight")?,
        view1(relation, "embed.bias")?,
        &reduce.out,
        true,
    );
    Ok(RelationTrace { reduce, embed })
}

fn relate_backward<F: NdFloat>(
    relation: &ParamSet<F>,
    trace: &RelationTrace<F>,
    dy: &Array3<F>,
    grads: &mut ParamSet<F>,
) -> Result<(Array3<F>, Array3<F>), ModelError> {
    let (d_reduce_out, dw_embed, db_embed) =
        conv1x1_backward(view2(relation, "embed.weight")?, &trace.embed, dy, true);
    accumulate(grads, "embed.weight", dw_embed.into_dyn())?;
    accumulate(grads, "embed.bias", db_embed.into_dyn())?;
    let (d_combined, dw_reduce, db_reduce) = conv1x1_backward(
        view2(relation, "reduce.weight")?,
        &trace.reduce,
        &d_reduce_out,
        true,
    );
    accumulate(grads, "reduce.weight", dw_reduce.into_dyn())?;
    accumulate(grads, "reduce.bias", db_reduce.into_dyn())?;
    let c = d_combined.dim().0 / 2;
    let mut parts = split_channels(&d_combined, &[c, c]);
    let d_query = parts.pop().expect("two parts");
    let d_fused = parts.pop().expect("two parts");
    Ok((d_fused, d_query))
}

// ---------------------------------------------------------------------------
// decoder

#[derive(Debug, Clone)]
struct DecoderBlockTrace<F> {
    split_sizes: [usize; 3],
    conv: ConvCache<F>,
}

/// Full forward trace: every activation needed for one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: NdFloat> {
    pub resolved: ResolvedModel,
    support_traces: Vec<EncoderTrace<F>>,
    fused: Vec<Array3<F>>,
    query_trace: EncoderTrace<F>,
    relation: RelationTrace<F>,
    blocks: Vec<DecoderBlockTrace<F>>,
    head: PointwiseCache<F>,
    /// Pre-clamp logits, spatial.
    pub logits: Array2<F>,
    /// Sigmoid of the clamped logits; strictly inside (0, 1).
    pub probs: Array2<F>,
}

impl<F: NdFloat> ForwardTrace<F> {
    pub fn n_supports(&self) -> usize {
        self.support_traces.len()
    }

    pub fn fused_stage(&self, stage: usize) -> &Array3<F> {
        &self.fused[stage]
    }

    pub fn query_stage(&self, stage: usize) -> &Array3<F> {
        self.query_trace.stage_output(stage)
    }

    pub fn relation_output(&self) -> &Array3<F> {
        self.relation.output()
    }
}

/// Decoder: `n_stages` upsample blocks. Each block concatenates the
/// fused-support and query encoder maps at its input resolution, upsamples
/// by 2 (nearest neighbor) and applies a 3x3 convolution with ReLU; a
/// pointwise head plus sigmoid produces the probability map.
fn decode<F: NdFloat>(
    decoder: &ParamSet<F>,
    resolved: &ResolvedModel,
    relation_out: &Array3<F>,
    fused: &[Array3<F>],
    query: &EncoderTrace<F>,
) -> Result<(Vec<DecoderBlockTrace<F>>, PointwiseCache<F>, Array2<F>, Array2<F>), ModelError> {
    let n = resolved.n_stages;
    let mut blocks = Vec::with_capacity(n);
    let mut x = relation_out.clone();
    for b in 0..n {
        let skip = n - 1 - b;
        let fused_skip = &fused[skip];
        let query_skip = query.stage_output(skip);
        if fused_skip.dim().1 != x.dim().1 || query_skip.dim().1 != x.dim().1 {
            return Err(ModelError::ShapeMismatch {
                what: "decoder skip resolution",
                expected: format!("{}", x.dim().1),
                got: format!("{} / {}", fused_skip.dim().1, query_skip.dim().1),
            });
        }
        let split_sizes = [x.dim().0, fused_skip.dim().0, query_skip.dim().0];
        let concat = concat_channels(&[&x, fused_skip, query_skip]);
        let up = upsample2_forward(&concat);
        let w = view4(decoder, &format!("block{b}.weight"))?;
        let bias = view1(decoder, &format!("block{b}.bias"))?;
        let cache = conv3x3_forward(w, bias, &up, true);
        x = cache.out.clone();
        blocks.push(DecoderBlockTrace {
            split_sizes,
            conv: cache,
        });
    }

    let head = conv1x1_forward(
        view2(decoder, "head.weight")?,
        view1(decoder, "head.bias")?,
        &x,
        false,
    );
    let side = resolved.input_size;
    let logits = head
        .out
        .view()
        .into_shape_with_order((side, side))
        .expect("single-channel head")
        .to_owned();
    let clamp = F::from(LOGIT_CLAMP).unwrap();
    let probs = logits.mapv(|z| {
        // branchy clamp so NaN logits stay NaN instead of being flushed
        let z = if z > clamp {
            clamp
        } else if z < -clamp {
            -clamp
        } else {
            z
        };
        F::one() / (F::one() + (-z).exp())
    });
    Ok((blocks, head, logits, probs))
}

/// Full pipeline: encode supports and query, fuse, relate, decode.
///
/// Supports are 4-channel tensors (RGB + mask), the query a 4-channel
/// tensor with a zero mask channel; see [`super::support_tensor`] and
/// [`super::query_tensor`].
pub fn forward<F: NdFloat>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    supports: &[Array3<F>],
    query: &Array3<F>,
) -> Result<ForwardTrace<F>, ModelError> {
    let resolved = config.resolve()?;
    if supports.is_empty() {
        return Err(ModelError::NoSupports);
    }
    let support_traces: Vec<EncoderTrace<F>> = supports
        .iter()
        .map(|s| encode(&params.encoder, &resolved, s))
        .collect::<Result<_, _>>()?;
    let query_trace = encode(&params.encoder, &resolved, query)?;

    let fused: Vec<Array3<F>> = (0..resolved.n_stages)
        .map(|stage| {
            let maps: Vec<&Array3<F>> = support_traces
                .iter()
                .map(|t| t.stage_output(stage))
                .collect();
            fuse_stage(&maps)
        })
        .collect::<Result<_, _>>()?;

    let relation = relate(
        &params.relation,
        fused.last().expect("stages"),
        query_trace.stage_output(resolved.n_stages - 1),
    )?;

    let (blocks, head, logits, probs) = decode(
        &params.decoder,
        &resolved,
        relation.output(),
        &fused,
        &query_trace,
    )?;

    Ok(ForwardTrace {
        resolved,
        support_traces,
        fused,
        query_trace,
        relation,
        blocks,
        head,
        logits,
        probs,
    })
}

/// Backward pass: `dlogits` is the loss gradient at the (clamped) logit
/// map. Returns parameter gradients with the same named layout as
/// `params`. Positions where the forward pass clamped receive zero.
pub fn backward<F: NdFloat>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    dlogits: &Array2<F>,
) -> Result<ModelParams<F>, ModelError> {
    let resolved = &trace.resolved;
    let side = resolved.input_size;
    if dlogits.dim() != (side, side) {
        return Err(ModelError::ShapeMismatch {
            what: "dlogits",
            expected: format!("({side}, {side})"),
            got: format!("{:?}", dlogits.dim()),
        });
    }
    let mut grads = params.zeros_like();

    // clamp gate
    let clamp = F::from(LOGIT_CLAMP).unwrap();
    let mut dz = dlogits.clone();
    dz.zip_mut_with(&trace.logits, |g, &z| {
        if z.abs() > clamp {
            *g = F::zero();
        }
    });

    // head
    let dz3 = dz
        .into_shape_with_order((1, side, side))
        .expect("logit reshape");
    let (mut d, dw_head, db_head) = conv1x1_backward(
        view2(&params.decoder, "head.weight")?,
        &trace.head,
        &dz3,
        false,
    );
    accumulate(&mut grads.decoder, "head.weight", dw_head.into_dyn())?;
    accumulate(&mut grads.decoder, "head.bias", db_head.into_dyn())?;

    // decoder blocks, reversed; skip gradients feed the encoders
    let n = resolved.n_stages;
    let mut d_fused: Vec<Option<Array3<F>>> = vec![None; n];
    let mut d_query: Vec<Option<Array3<F>>> = vec![None; n];
    for b in (0..n).rev() {
        let block = &trace.blocks[b];
        let w = view4(&params.decoder, &format!("block{b}.weight"))?;
        let (d_up, dw, db) = conv3x3_backward(w, &block.conv, &d, true);
        accumulate(&mut grads.decoder, &format!("block{b}.weight"), dw.into_dyn())?;
        accumulate(&mut grads.decoder, &format!("block{b}.bias"), db.into_dyn())?;
        let d_concat = upsample2_backward(&d_up);
        let mut parts = split_channels(&d_concat, &block.split_sizes);
        let dq = parts.pop().expect("three parts");
        let df = parts.pop().expect("three parts");
        let dx = parts.pop().expect("three parts");
        let skip = n - 1 - b;
        add_opt(&mut d_fused[skip], df);
        add_opt(&mut d_query[skip], dq);
        d = dx;
    }

    // relation
    let (df_deep, dq_deep) = relate_backward(&params.relation, &trace.relation, &d, &mut grads.relation)?;
    add_opt(&mut d_fused[n - 1], df_deep);
    add_opt(&mut d_query[n - 1], dq_deep);

    // query encoder
    let query_grads: Vec<Array3<F>> = d_query
        .into_iter()
        .enumerate()
        .map(|(stage, g)| g.unwrap_or_else(|| zeros_like_stage(trace, stage)))
        .collect();
    encode_backward(
        &params.encoder,
        &trace.query_trace,
        query_grads,
        &mut grads.encoder,
    )?;

    // support encoders: the mean routes 1/K of each fused gradient to
    // every support
    let k = trace.support_traces.len();
    let inv_k = F::one() / F::from(k).unwrap();
    let shared: Vec<Array3<F>> = d_fused
        .into_iter()
        .enumerate()
        .map(|(stage, g)| match g {
            Some(g) => g.mapv(|v| v * inv_k),
            None => zeros_like_stage(trace, stage),
        })
        .collect();
    for support in &trace.support_traces {
        encode_backward(&params.encoder, support, shared.clone(), &mut grads.encoder)?;
    }

    Ok(grads)
}

fn add_opt<F: NdFloat>(slot: &mut Option<Array3<F>>, delta: Array3<F>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

fn zeros_like_stage<F: NdFloat>(trace: &ForwardTrace<F>, stage: usize) -> Array3<F> {
    Array3::zeros(trace.query_trace.stage_output(stage).dim())
}
