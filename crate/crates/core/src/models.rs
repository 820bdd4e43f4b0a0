//! Tiny convolutional classifiers with named feature taps.
//!
//! One [`ParamSet`] holds the full-precision master weights. Every
//! quantized variant reads those same tensors through its own
//! [`VariantSpecs`] — weights and tagged activations pass through the
//! variant's fake quantizers during the forward — so a single optimizer
//! step on the masters moves all variants at once. Forward passes run on
//! a caller-supplied tape and hand back the logits together with the
//! tapped feature maps the disalignment losses consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TriqError};
use crate::losses::LayerTapSet;
use crate::quant::{self, QuantSpec, FULL_PRECISION_BITS};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── architectures ──────────────────────────────────────────────────────

/// The supported network families, selected by name in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    TinyCnnS,
    TinyCnnM,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tinycnn-s" => Ok(Self::TinyCnnS),
            "tinycnn-m" => Ok(Self::TinyCnnM),
            other => Err(TriqError::Config(format!(
                "unknown architecture {other:?}: expected tinycnn-s or tinycnn-m"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TinyCnnS => "tinycnn-s",
            Self::TinyCnnM => "tinycnn-m",
        }
    }

    fn blocks(self) -> Vec<ConvBlock> {
        let spec: &[(usize, bool)] = match self {
            // conv/relu/pool, conv/relu/pool, conv/relu
            Self::TinyCnnS => &[(16, true), (32, true), (64, false)],
            // one extra conv block and a final pool before the head
            Self::TinyCnnM => &[(16, true), (32, true), (48, false), (64, true)],
        };
        spec.iter()
            .map(|&(out_c, pool)| ConvBlock { out_c, pool })
            .collect()
    }
}

/// One 3x3 conv (stride 1, zero padding 1) followed by ReLU, an
/// activation quantizer, and optionally a 2x2 max pool.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    out_c: usize,
    pool: bool,
}

/// A fully shaped network: architecture, input geometry, class count,
/// and the named tap sites whose activations the feature loss reads.
/// Taps default to the outputs of the first three conv blocks.
#[derive(Debug, Clone)]
pub struct ModelDef {
    arch: Architecture,
    in_channels: usize,
    input_h: usize,
    input_w: usize,
    classes: usize,
    blocks: Vec<ConvBlock>,
    taps: LayerTapSet,
}

impl ModelDef {
    pub fn new(
        arch: Architecture,
        in_channels: usize,
        input_h: usize,
        input_w: usize,
        classes: usize,
    ) -> Result<Self> {
        if in_channels == 0 {
            return Err(TriqError::Config("model needs at least one input channel".into()));
        }
        if classes < 2 {
            return Err(TriqError::Config(format!(
                "model needs at least two classes, got {classes}"
            )));
        }
        let blocks = arch.blocks();
        let (mut h, mut w) = (input_h, input_w);
        for (i, b) in blocks.iter().enumerate() {
            // 3x3 pad-1 convs preserve the plane; only pooling shrinks it.
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(TriqError::Config(format!(
                        "input {input_h}x{input_w} too small for {}: block {} would pool a {h}x{w} map",
                        arch.name(),
                        i + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h == 0 || w == 0 {
            return Err(TriqError::Config(format!(
                "input {input_h}x{input_w} too small for {}",
                arch.name()
            )));
        }
        let tap_names: Vec<String> = (1..=blocks.len().min(3)).map(|i| format!("block{i}")).collect();
        Ok(Self {
            arch,
            in_channels,
            input_h,
            input_w,
            classes,
            blocks,
            taps: LayerTapSet::new(tap_names)?,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_h, self.input_w)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn taps(&self) -> &LayerTapSet {
        &self.taps
    }

    /// Activation-quantizer sites in forward order: one after each
    /// block's ReLU, one after global average pooling.
    pub fn act_sites(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.blocks.len()).map(|i| format!("block{i}.act")).collect();
        names.push("gap".into());
        names
    }

    /// Shape and quantization eligibility of every master tensor, in the
    /// fixed order [`ParamSet::init`], `bind`, and the optimizer use.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{}.w", i + 1), vec![b.out_c, c_in, 3, 3], true));
            out.push((format!("conv{}.b", i + 1), vec![b.out_c], false));
            c_in = b.out_c;
        }
        out.push(("dense.w".into(), vec![self.classes, c_in], true));
        out.push(("dense.b".into(), vec![self.classes], false));
        out
    }
}

// ── master parameters ──────────────────────────────────────────────────

/// One master tensor: its name, its current full-precision value, and
/// whether variants read it through a quantizer (bias vectors do not).
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub quantized: bool,
}

/// The shared full-precision master weights, in a fixed layout order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    /// Kaiming-uniform initialization — kernels drawn from
    /// ±sqrt(6 / fan_in), biases zero — off a seeded ChaCha8 stream in
    /// layout order, so one seed always yields the same network.
    pub fn init(def: &ModelDef, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = def
            .layout()
            .into_iter()
            .map(|(name, shape, quantized)| {
                let n: usize = shape.iter().product();
                let data = if quantized {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                ParamEntry {
                    name,
                    tensor: Tensor::new(shape, data).unwrap(),
                    quantized,
                }
            })
            .collect();
        Self { entries }
    }

    /// Rebuilds a set from saved tensors, which must match the model's
    /// layout order and shapes exactly.
    pub fn load(def: &ModelDef, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = def.layout();
        if tensors.len() != layout.len() {
            return Err(TriqError::InvalidArg(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let entries = layout
            .into_iter()
            .zip(tensors)
            .map(|((name, shape, quantized), tensor)| {
                if tensor.shape() != shape.as_slice() {
                    return Err(TriqError::InvalidArg(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        tensor.shape()
                    )));
                }
                Ok(ParamEntry {
                    name,
                    tensor,
                    quantized,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Materializes every master tensor as a gradient-carrying leaf on
    /// `tape`. One bind serves all variants built that step, which is
    /// what couples their losses to the same weights.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            nodes: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.tensor.clone(), true))
                .collect(),
        }
    }
}

/// Master weights materialized as leaves on one training tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

// ── per-variant quantizers ─────────────────────────────────────────────

/// One bit-width's quantizers: a spec per quantized master tensor and a
/// spec per activation site, in layout order.
#[derive(Debug, Clone)]
pub struct VariantSpecs {
    bits: u8,
    weight: Vec<Option<QuantSpec>>,
    act: Vec<QuantSpec>,
}

impl VariantSpecs {
    /// Identity quantizers everywhere: the variant computes exactly the
    /// master model.
    pub fn full_precision(def: &ModelDef, params: &ParamSet) -> Self {
        let maxima = vec![1.0; def.act_sites().len()];
        Self::calibrated(def, params, FULL_PRECISION_BITS, &maxima).unwrap()
    }

    /// Fresh weight scales from the current master weights, activation
    /// scales from the supplied per-site running maxima of |activation|.
    pub fn calibrated(def: &ModelDef, params: &ParamSet, bits: u8, act_max: &[f64]) -> Result<Self> {
        let sites = def.act_sites().len();
        if act_max.len() != sites {
            return Err(TriqError::InvalidArg(format!(
                "expected {sites} activation maxima, got {}",
                act_max.len()
            )));
        }
        let weight = params
            .entries()
            .iter()
            .map(|e| {
                if e.quantized {
                    quant::calibrate(&e.tensor, bits).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let act = act_max
            .iter()
            .map(|&m| quant::calibrate_from_max_abs(m, bits))
            .collect::<Result<_>>()?;
        Ok(Self { bits, weight, act })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn weight_specs(&self) -> &[Option<QuantSpec>] {
        &self.weight
    }

    pub fn act_specs(&self) -> &[QuantSpec] {
        &self.act
    }
}

// ── forward passes ─────────────────────────────────────────────────────

/// Everything one variant forward produces: the logits, the tapped
/// feature maps in tap-set order, and the largest |value| seen at each
/// activation-quantizer input (the statistic running-max calibration
/// tracks).
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: NodeId,
    pub taps: Vec<NodeId>,
    pub act_abs_max: Vec<f64>,
}

/// Runs one variant's forward pass. Weights and tagged activations pass
/// through the variant's fake quantizers; the tapped nodes are the block
/// outputs as the variant computes them.
pub fn forward_traced(
    tape: &mut Tape,
    def: &ModelDef,
    bound: &BoundParams,
    specs: &VariantSpecs,
    x: NodeId,
) -> Result<Forward> {
    if !tape.owns(x) || bound.nodes.iter().any(|&n| !tape.owns(n)) {
        return Err(TriqError::InvalidArg(
            "forward: input or parameters are not on this tape".into(),
        ));
    }
    let expect = def.layout().len();
    if bound.nodes.len() != expect || specs.weight.len() != expect {
        return Err(TriqError::InvalidArg(
            "forward: bound parameters do not match the model layout".into(),
        ));
    }
    let s = tape.shape_of(x).to_vec();
    if s.len() != 4 || s[1] != def.in_channels || s[2] != def.input_h || s[3] != def.input_w {
        return Err(TriqError::ShapeMismatch {
            op: "forward_with_taps",
            lhs: s,
            rhs: vec![0, def.in_channels, def.input_h, def.input_w],
        });
    }

    let fq = |tape: &mut Tape, node: NodeId, spec: &Option<QuantSpec>| -> Result<NodeId> {
        match spec {
            Some(sp) => quant::fake_quantize(tape, node, sp),
            None => Ok(node),
        }
    };

    let mut cur = x;
    let mut taps = Vec::new();
    let mut act_abs_max = Vec::new();
    let mut p = 0;
    for (i, b) in def.blocks.iter().enumerate() {
        let w = fq(tape, bound.nodes[p], &specs.weight[p])?;
        let conv = tape.conv2d(cur, w, 1)?;
        let biased = tape.bias_add_channel(conv, bound.nodes[p + 1])?;
        let act = tape.relu(biased)?;
        act_abs_max.push(tape.value(act).max_abs());
        let actq = quant::fake_quantize(tape, act, &specs.act[i])?;
        cur = if b.pool { tape.max_pool2(actq)? } else { actq };
        if taps.len() < def.taps.len() {
            taps.push(cur);
        }
        p += 2;
    }

    let pooled = tape.global_avg_pool(cur)?;
    act_abs_max.push(tape.value(pooled).max_abs());
    let pooledq = quant::fake_quantize(tape, pooled, &specs.act[def.blocks.len()])?;
    let wq = fq(tape, bound.nodes[p], &specs.weight[p])?;
    let wt = tape.transpose2(wq)?;
    let proj = tape.matmul(pooledq, wt)?;
    let logits = tape.bias_add_row(proj, bound.nodes[p + 1])?;
    Ok(Forward {
        logits,
        taps,
        act_abs_max,
    })
}

/// [`forward_traced`] without the calibration statistics: just the
/// logits and the tapped feature maps.
pub fn forward_with_taps(
    tape: &mut Tape,
    def: &ModelDef,
    bound: &BoundParams,
    specs: &VariantSpecs,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let f = forward_traced(tape, def, bound, specs, x)?;
    Ok((f.logits, f.taps))
}

/// Forward plus batch-mean softmax cross-entropy in one call.
pub fn clean_ce(
    tape: &mut Tape,
    def: &ModelDef,
    bound: &BoundParams,
    specs: &VariantSpecs,
    x: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let (logits, _) = forward_with_taps(tape, def, bound, specs, x)?;
    tape.softmax_cross_entropy(logits, labels)
}

// ── tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::fdp_loss;
    use crate::losses::VariantTaps;
    use crate::perceptual::{HogParams, SoftBinarizeParams};
    use crate::LossWeights;

    fn small_def() -> ModelDef {
        ModelDef::new(Architecture::TinyCnnS, 1, 8, 8, 2).unwrap()
    }

    fn input(def: &ModelDef, n: usize, seed: u64) -> Tensor {
        let (h, w) = def.input_hw();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * def.in_channels() * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(vec![n, def.in_channels(), h, w], data).unwrap()
    }

    #[test]
    fn architecture_names_round_trip_and_reject_unknowns() {
        for arch in [Architecture::TinyCnnS, Architecture::TinyCnnM] {
            assert_eq!(Architecture::parse(arch.name()).unwrap(), arch);
        }
        assert!(Architecture::parse("resnet-56").is_err());
    }

    #[test]
    fn geometry_and_class_count_are_validated() {
        assert!(ModelDef::new(Architecture::TinyCnnS, 0, 8, 8, 2).is_err());
        assert!(ModelDef::new(Architecture::TinyCnnS, 1, 8, 8, 1).is_err());
        // Each pool needs a 2x2 map: the small net pools twice, the
        // larger one three times.
        assert!(ModelDef::new(Architecture::TinyCnnS, 1, 4, 4, 2).is_ok());
        assert!(ModelDef::new(Architecture::TinyCnnS, 1, 2, 2, 2).is_err());
        assert!(ModelDef::new(Architecture::TinyCnnM, 1, 8, 8, 2).is_ok());
        assert!(ModelDef::new(Architecture::TinyCnnM, 1, 4, 4, 2).is_err());
    }

    #[test]
    fn parameter_layout_matches_architecture() {
        let def = ModelDef::new(Architecture::TinyCnnS, 3, 16, 16, 10).unwrap();
        let params = ParamSet::init(&def, 0);
        let got: Vec<(&str, Vec<usize>, bool)> = params
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), e.tensor.shape().to_vec(), e.quantized))
            .collect();
        assert_eq!(
            got,
            vec![
                ("conv1.w", vec![16, 3, 3, 3], true),
                ("conv1.b", vec![16], false),
                ("conv2.w", vec![32, 16, 3, 3], true),
                ("conv2.b", vec![32], false),
                ("conv3.w", vec![64, 32, 3, 3], true),
                ("conv3.b", vec![64], false),
                ("dense.w", vec![10, 64], true),
                ("dense.b", vec![10], false),
            ]
        );
        let total: usize = got.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        assert_eq!(params.param_count(), total);
        assert_eq!(
            def.act_sites(),
            vec!["block1.act", "block2.act", "block3.act", "gap"]
        );
        assert_eq!(def.taps().names(), ["block1", "block2", "block3"]);
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let def = small_def();
        let a = ParamSet::init(&def, 42);
        let b = ParamSet::init(&def, 42);
        let c = ParamSet::init(&def, 43);
        let flat = |p: &ParamSet| -> Vec<u64> {
            p.entries()
                .iter()
                .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));

        for e in a.entries() {
            if e.quantized {
                let fan_in: usize = e.tensor.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(e.tensor.data().iter().all(|v| v.abs() < bound));
                assert!(e.tensor.data().iter().any(|&v| v != 0.0));
            } else {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn loading_saved_tensors_checks_the_layout() {
        let def = small_def();
        let params = ParamSet::init(&def, 1);
        let tensors: Vec<Tensor> = params.entries().iter().map(|e| e.tensor.clone()).collect();
        let reloaded = ParamSet::load(&def, tensors.clone()).unwrap();
        assert_eq!(reloaded.get("conv1.w").unwrap(), params.get("conv1.w").unwrap());

        assert!(ParamSet::load(&def, tensors[..3].to_vec()).is_err());
        let mut wrong = tensors;
        wrong[0] = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(ParamSet::load(&def, wrong).is_err());
    }

    #[test]
    fn full_precision_forward_is_bit_identical_to_a_plain_one() {
        let def = small_def();
        let params = ParamSet::init(&def, 11);
        let x = input(&def, 2, 3);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xn = tape.constant(x);
        let specs = VariantSpecs::full_precision(&def, &params);
        let (logits, taps) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();

        // The same graph spelled out without any quantizers on the same
        // leaves must agree to the bit.
        let nodes = bound.nodes();
        let c1 = tape.conv2d(xn, nodes[0], 1).unwrap();
        let c1 = tape.bias_add_channel(c1, nodes[1]).unwrap();
        let c1 = tape.relu(c1).unwrap();
        let c1 = tape.max_pool2(c1).unwrap();
        let c2 = tape.conv2d(c1, nodes[2], 1).unwrap();
        let c2 = tape.bias_add_channel(c2, nodes[3]).unwrap();
        let c2 = tape.relu(c2).unwrap();
        let c2 = tape.max_pool2(c2).unwrap();
        let c3 = tape.conv2d(c2, nodes[4], 1).unwrap();
        let c3 = tape.bias_add_channel(c3, nodes[5]).unwrap();
        let c3 = tape.relu(c3).unwrap();
        let g = tape.global_avg_pool(c3).unwrap();
        let wt = tape.transpose2(nodes[6]).unwrap();
        let proj = tape.matmul(g, wt).unwrap();
        let plain = tape.bias_add_row(proj, nodes[7]).unwrap();

        let a: Vec<u64> = tape.value(logits).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = tape.value(plain).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        assert_eq!(taps.len(), 3);
        assert_eq!(tape.shape_of(taps[0]), [2, 16, 4, 4]);
        assert_eq!(tape.shape_of(taps[1]), [2, 32, 2, 2]);
        assert_eq!(tape.shape_of(taps[2]), [2, 64, 2, 2]);
        assert_eq!(tape.shape_of(logits), [2, 2]);
    }

    #[test]
    fn every_bit_width_taps_every_site() {
        let def = small_def();
        let params = ParamSet::init(&def, 7);
        let x = input(&def, 1, 9);
        let act_max = vec![1.0; def.act_sites().len()];
        for bits in [FULL_PRECISION_BITS, 8, 2] {
            let specs = VariantSpecs::calibrated(&def, &params, bits, &act_max).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let (_, taps) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();
            assert_eq!(taps.len(), def.taps().len());
        }
    }

    #[test]
    fn malformed_inputs_and_foreign_nodes_are_rejected() {
        let def = small_def();
        let params = ParamSet::init(&def, 7);
        let specs = VariantSpecs::full_precision(&def, &params);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let bad = tape.constant(Tensor::new(vec![1, 1, 4, 4], vec![0.0; 16]).unwrap());
        assert!(forward_with_taps(&mut tape, &def, &bound, &specs, bad).is_err());

        let mut other = Tape::new();
        let foreign = other.constant(input(&def, 1, 0));
        assert!(forward_with_taps(&mut tape, &def, &bound, &specs, foreign).is_err());

        assert!(VariantSpecs::calibrated(&def, &params, 4, &[1.0]).is_err());
    }

    /// Independent re-execution of a low-bit forward in plain loops:
    /// quantize the weights, convolve, add bias, rectify, quantize the
    /// activations, pool, average, project. Any disagreement with the
    /// tape's composite-op version is a fault in one of them.
    fn oracle_forward(def: &ModelDef, params: &ParamSet, specs: &VariantSpecs, x: &Tensor) -> Vec<f64> {
        let (ih, iw) = def.input_hw();
        let n = x.shape()[0];
        let mut cur = x.data().to_vec();
        let (mut c, mut h, mut w) = (def.in_channels(), ih, iw);
        let mut p = 0;
        for (i, b) in def.blocks.iter().enumerate() {
            let wspec = specs.weight_specs()[p].as_ref().unwrap();
            let kq = quant::quantize_values(&params.entries()[p].tensor, wspec);
            let bias = params.entries()[p + 1].tensor.data();
            let mut out = vec![0.0; n * b.out_c * h * w];
            for im in 0..n {
                for co in 0..b.out_c {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = bias[co];
                            for ci in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = oy as i64 + ky as i64 - 1;
                                        let ix = ox as i64 + kx as i64 - 1;
                                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                            continue;
                                        }
                                        let xi = ((im * c + ci) * h + iy as usize) * w + ix as usize;
                                        let wi = ((co * c + ci) * 3 + ky) * 3 + kx;
                                        acc += cur[xi] * kq.data()[wi];
                                    }
                                }
                            }
                            out[((im * b.out_c + co) * h + oy) * w + ox] = acc.max(0.0);
                        }
                    }
                }
            }
            let acts = Tensor::new(vec![n, b.out_c, h, w], out).unwrap();
            let mut cur2 = quant::quantize_values(&acts, &specs.act_specs()[i]).data().to_vec();
            if b.pool {
                let (ph, pw) = (h / 2, w / 2);
                let mut pooled = vec![0.0; n * b.out_c * ph * pw];
                for im in 0..n {
                    for ch in 0..b.out_c {
                        for py in 0..ph {
                            for px in 0..pw {
                                let mut best = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let xi = ((im * b.out_c + ch) * h + 2 * py + dy) * w
                                            + 2 * px
                                            + dx;
                                        best = best.max(cur2[xi]);
                                    }
                                }
                                pooled[((im * b.out_c + ch) * ph + py) * pw + px] = best;
                            }
                        }
                    }
                }
                cur2 = pooled;
                h = ph;
                w = pw;
            }
            cur = cur2;
            c = b.out_c;
            p += 2;
        }

        let mut gap = vec![0.0; n * c];
        for im in 0..n {
            for ch in 0..c {
                let base = (im * c + ch) * h * w;
                gap[im * c + ch] = cur[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
            }
        }
        let gapq = quant::quantize_values(
            &Tensor::new(vec![n, c], gap).unwrap(),
            &specs.act_specs()[def.blocks.len()],
        );
        let dspec = specs.weight_specs()[p].as_ref().unwrap();
        let dw = quant::quantize_values(&params.entries()[p].tensor, dspec);
        let db = params.entries()[p + 1].tensor.data();
        let k = def.classes();
        let mut logits = vec![0.0; n * k];
        for im in 0..n {
            for cls in 0..k {
                let mut acc = db[cls];
                for ch in 0..c {
                    acc += gapq.data()[im * c + ch] * dw.data()[cls * c + ch];
                }
                logits[im * k + cls] = acc;
            }
        }
        logits
    }

    #[test]
    fn two_bit_forward_matches_a_hand_executed_network() {
        let def = small_def();
        let params = ParamSet::init(&def, 5);
        let x = input(&def, 2, 17);
        let act_max = [0.9, 0.8, 0.7, 0.6];
        let specs = VariantSpecs::calibrated(&def, &params, 2, &act_max).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xn = tape.constant(x.clone());
        let (logits, _) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();

        let expect = oracle_forward(&def, &params, &specs, &x);
        let got = tape.value(logits).data();
        assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "logit mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn one_variants_loss_moves_every_variants_logits() {
        let def = small_def();
        let mut params = ParamSet::init(&def, 21);
        let x = input(&def, 4, 2);
        let labels = vec![0, 1, 0, 1];
        let act_max = vec![1.0; def.act_sites().len()];

        let logits_of = |params: &ParamSet, bits: u8| -> Vec<f64> {
            let specs = VariantSpecs::calibrated(&def, params, bits, &act_max).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let (l, _) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();
            tape.value(l).data().to_vec()
        };
        let before32 = logits_of(&params, FULL_PRECISION_BITS);
        let before4 = logits_of(&params, 4);

        // Descend only the 4-bit variant's loss, then update the masters.
        let specs4 = VariantSpecs::calibrated(&def, &params, 4, &act_max).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xn = tape.constant(x.clone());
        let ce = clean_ce(&mut tape, &def, &bound, &specs4, xn, &labels).unwrap();
        let grads = tape.backward(ce).unwrap();
        for (entry, &node) in params.entries_mut().iter_mut().zip(bound.nodes()) {
            let g = tape.grad_tensor(&grads, node);
            let updated: Vec<f64> = entry
                .tensor
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, gw)| w - 0.05 * gw)
                .collect();
            entry.tensor = Tensor::new(entry.tensor.shape().to_vec(), updated).unwrap();
        }

        let after32 = logits_of(&params, FULL_PRECISION_BITS);
        let after4 = logits_of(&params, 4);
        let delta = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        assert!(delta(&before4, &after4) > 1e-9, "trained variant did not move");
        assert!(
            delta(&before32, &after32) > 1e-9,
            "full-precision variant did not follow the shared weights"
        );
    }

    #[test]
    fn feature_loss_reaches_the_master_weights() {
        let def = ModelDef::new(Architecture::TinyCnnS, 1, 16, 16, 2).unwrap();
        let params = ParamSet::init(&def, 13);
        let x = input(&def, 2, 31);
        let act_max = vec![1.0; def.act_sites().len()];

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xn = tape.constant(x);
        let mut variants = Vec::new();
        for bits in [FULL_PRECISION_BITS, 2] {
            let specs = VariantSpecs::calibrated(&def, &params, bits, &act_max).unwrap();
            let (_, taps) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();
            variants.push(VariantTaps { bits, taps });
        }
        let loss = fdp_loss(
            &mut tape,
            def.taps(),
            &variants,
            &SoftBinarizeParams::default(),
            &HogParams::default(),
            &LossWeights::default(),
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = tape.grad_tensor(&grads, bound.nodes()[0]);
        assert!(
            g.data().iter().any(|&v| v.abs() > 1e-12),
            "feature disalignment does not reach conv1 weights"
        );
    }

    #[test]
    fn cross_entropy_wrapper_validates_and_matches_the_formula() {
        let def = small_def();
        let mut params = ParamSet::init(&def, 3);
        let x = input(&def, 3, 5);
        let specs = VariantSpecs::full_precision(&def, &params);

        // Out-of-range labels are refused.
        {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x.clone());
            assert!(clean_ce(&mut tape, &def, &bound, &specs, xn, &[0, 2, 0]).is_err());
        }

        // Random fixture: the wrapper must equal the CE formula applied
        // to its own logits.
        let labels = vec![0, 1, 1];
        let (ce_val, logit_val) = {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let (logits, _) = forward_with_taps(&mut tape, &def, &bound, &specs, xn).unwrap();
            let ce = tape.softmax_cross_entropy(logits, &labels).unwrap();
            (tape.value(ce).data()[0], tape.value(logits).clone())
        };
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logit_val.data()[i * 2..(i + 1) * 2];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            expect += m + z.ln() - row[y];
        }
        expect /= labels.len() as f64;
        assert!((ce_val - expect).abs() < 1e-12);

        // All-zero weights give uniform logits: CE = ln(classes). A huge
        // correct-class bias drives it to zero.
        for e in params.entries_mut() {
            e.tensor = Tensor::new(e.tensor.shape().to_vec(), vec![0.0; e.tensor.numel()]).unwrap();
        }
        let specs0 = VariantSpecs::full_precision(&def, &params);
        {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let ce = clean_ce(&mut tape, &def, &bound, &specs0, xn, &[0, 0, 1]).unwrap();
            assert!((tape.value(ce).data()[0] - (2.0_f64).ln()).abs() < 1e-12);
        }
        {
            let bias: Vec<f64> = vec![50.0, 0.0];
            let idx = params
                .entries()
                .iter()
                .position(|e| e.name == "dense.b")
                .unwrap();
            params.entries_mut()[idx].tensor = Tensor::new(vec![2], bias).unwrap();
            let specs1 = VariantSpecs::full_precision(&def, &params);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xn = tape.constant(x);
            let ce = clean_ce(&mut tape, &def, &bound, &specs1, xn, &[0, 0, 0]).unwrap();
            assert!(tape.value(ce).data()[0].abs() < 1e-12);
        }
    }
}
