//! The constraint function: a classifier head on the VAE latent mean.

use std::io::{Read, Write};
use std::path::Path;

use crate::density::{backbone_backward, encoder_batch, AuxTerm, VaeGrads, VaeModel};
use crate::error::{domain, Error, Result};
use crate::neural::{get_f64, put_f64, Activation, Grads, LayerSpec, NetworkModel, ParamSet, Tensor};
use crate::pairs::Pairing;
use crate::scene::{lane_of, Pose, RoadSpec, VehicleState};

pub const LOG_CLAMP: f64 = 1e-7;
pub const HEAD_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintModel {
    pub backbone: VaeModel,
    /// `latent_dim -> HEAD_HIDDEN -> 1` logit.
    pub head: NetworkModel,
    pub decision_threshold: f64,
    /// Train the head only.
    pub freeze_backbone: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ConstraintModel {
    pub fn new(backbone: VaeModel, head: NetworkModel, decision_threshold: f64) -> Result<Self> {
        if head.input_shape().iter().product::<usize>() != backbone.latent_dim
            || head.output_shape().iter().product::<usize>() != 1
        {
            return Err(domain("head must map latent_dim values to one logit"));
        }
        Ok(ConstraintModel {
            backbone,
            head,
            decision_threshold,
            freeze_backbone: false,
        })
    }

    fn check_input(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.backbone.input_len() {
            return Err(domain(format!(
                "image of {} values does not match backbone input of {}",
                image.len(),
                self.backbone.input_len()
            )));
        }
        Ok(())
    }

    pub fn logit(&self, image: &[f64]) -> Result<f64> {
        self.check_input(image)?;
        let mu = self.backbone.encode_mu(image)?;
        Ok(self.head.predict_slice(&mu)?.data[0])
    }

    /// Probability that the pair is constrained.
    pub fn classify(&self, image: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(image)?))
    }

    pub fn is_constrained(&self, image: &[f64]) -> Result<bool> {
        Ok(self.classify(image)? > self.decision_threshold)
    }

    pub fn zero_grads(&self) -> ConstraintGrads {
        ConstraintGrads {
            backbone: self.backbone.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    const MAGIC: &'static [u8; 8] = b"CINFCKPT";

    /// Writes a checkpoint with the VAE+head kind flag.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_checkpoint(w, &self.backbone, Some(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn same_parameters(&self, other: &ConstraintModel) -> bool {
        self.backbone.same_parameters(&other.backbone)
            && self.head.same_parameters(&other.head)
            && self.decision_threshold.to_bits() == other.decision_threshold.to_bits()
            && self.freeze_backbone == other.freeze_backbone
    }
}

impl ParamSet for ConstraintModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.extend(self.head.params());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGrads {
    pub backbone: VaeGrads,
    pub head: Grads,
}

impl ConstraintGrads {
    pub fn add(&mut self, other: &ConstraintGrads) {
        self.backbone.add(&other.backbone);
        crate::neural::add_grads(&mut self.head, &other.head);
    }

    /// Flattened in [`ParamSet::tensors`] order.
    pub fn flat(self) -> Grads {
        let mut v = self.backbone.flat();
        v.extend(self.head);
        v
    }
}

/// Checkpoint kinds stored after the magic.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Vae(VaeModel),
    Constraint(ConstraintModel),
}

fn write_checkpoint(w: &mut impl Write, vae: &VaeModel, cm: Option<&ConstraintModel>) -> std::io::Result<()> {
    w.write_all(ConstraintModel::MAGIC)?;
    w.write_all(&[if cm.is_some() { 2 } else { 1 }])?;
    vae.write_to(w)?;
    if let Some(cm) = cm {
        cm.head.write_to(w)?;
        put_f64(w, cm.decision_threshold)?;
        w.write_all(&[cm.freeze_backbone as u8])?;
    }
    Ok(())
}

pub fn write_vae_checkpoint(w: &mut impl Write, vae: &VaeModel) -> std::io::Result<()> {
    write_checkpoint(w, vae, None)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    if &magic[..8] != ConstraintModel::MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let vae = VaeModel::read_from(r)?;
    match magic[8] {
        1 => Ok(Checkpoint::Vae(vae)),
        2 => {
            let head = NetworkModel::read_from(r)?;
            let threshold = get_f64(r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)
                .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
            let mut cm = ConstraintModel::new(vae, head, threshold)?;
            cm.freeze_backbone = flag[0] != 0;
            Ok(Checkpoint::Constraint(cm))
        }
        k => Err(Error::Format(format!("unknown checkpoint kind {k}"))),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Copies the backbone and attaches a head that outputs `bias_prior`
/// everywhere: hidden layer randomly initialized, output weights zero,
/// output bias `logit(bias_prior)`.
pub fn init_from_vae(vae: &VaeModel, bias_prior: f64, seed: u64) -> Result<ConstraintModel> {
    if !(bias_prior > 0.0 && bias_prior < 1.0) {
        return Err(domain("bias_prior must lie in (0, 1)"));
    }
    let mut head = NetworkModel::new(
        &[vae.latent_dim],
        vec![
            LayerSpec::Dense {
                inputs: vae.latent_dim,
                outputs: HEAD_HIDDEN,
            },
            LayerSpec::Act(Activation::SmoothLeaky),
            LayerSpec::Dense {
                inputs: HEAD_HIDDEN,
                outputs: 1,
            },
        ],
        seed,
    )?;
    {
        let mut ps: Vec<&mut Tensor> = head.params_mut().collect();
        let n = ps.len();
        ps[n - 2].data.fill(0.0);
        ps[n - 1].data[0] = logit(bias_prior);
    }
    ConstraintModel::new(vae.clone(), head, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    DemoUnconstrained,
    PlannerConstrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Tensor,
    pub label: Label,
    pub instance_id: String,
    pub t: usize,
}

/// Loss terms; they sum to the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstraintParts {
    pub demo_bce: f64,
    pub planner_bce: f64,
    pub rmse: f64,
    /// `beta * sum KL`.
    pub kl_term: f64,
}

impl ConstraintParts {
    pub fn total(&self) -> f64 {
        self.demo_bce + self.planner_bce + self.rmse + self.kl_term
    }

    pub fn add(&mut self, o: &ConstraintParts) {
        self.demo_bce += o.demo_bce;
        self.planner_bce += o.planner_bce;
        self.rmse += o.rmse;
        self.kl_term += o.kl_term;
    }
}

/// Per-class multipliers applied to every term an example contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub demo: f64,
    pub planner: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights { demo: 1.0, planner: 1.0 }
    }
}

/// One weighted example of a loss batch. `eps` is the reparameterization
/// noise and is only read for demonstration examples.
pub struct BatchEntry<'a> {
    pub example: &'a LabeledExample,
    pub eps: &'a [f64],
    pub weight: f64,
}

/// Loss of a batch; gradients are added into `grads`.
pub fn batch_loss(
    model: &ConstraintModel,
    batch: &[BatchEntry<'_>],
    beta: f64,
    grads: &mut ConstraintGrads,
) -> Result<ConstraintParts> {
    let l = model.backbone.latent_dim;
    for e in batch {
        model.check_input(&e.example.image.data)?;
        if e.example.label == Label::DemoUnconstrained && e.eps.len() != l {
            return Err(domain("demo examples need latent_dim noise values"));
        }
    }
    let xs: Vec<&[f64]> = batch.iter().map(|e| e.example.image.data.as_slice()).collect();
    let enc = encoder_batch(&model.backbone, &xs)?;
    let mus: Vec<&[f64]> = enc.out.iter().map(|o| &o[..l]).collect();
    let (zs, hcache) = model.head.forward_batch(&mus)?;
    let mut parts = ConstraintParts::default();
    let mut dzs = Vec::with_capacity(batch.len());
    for (e, z) in batch.iter().zip(&zs) {
        let y = sigmoid(z[0]);
        let s = y * (1.0 - y);
        let (bce, dz) = match e.example.label {
            Label::DemoUnconstrained => (-(1.0 - y + LOG_CLAMP).ln(), s / (1.0 - y + LOG_CLAMP)),
            Label::PlannerConstrained => (-(y + LOG_CLAMP).ln(), -s / (y + LOG_CLAMP)),
        };
        if !bce.is_finite() {
            return Err(Error::Numeric("non-finite classifier output".into()));
        }
        match e.example.label {
            Label::DemoUnconstrained => parts.demo_bce += e.weight * bce,
            Label::PlannerConstrained => parts.planner_bce += e.weight * bce,
        }
        dzs.push(vec![e.weight * dz]);
    }
    let g_mu = model
        .head
        .backward_batch(&hcache, &dzs, &mut grads.head, !model.freeze_backbone)?;
    let aux: Vec<AuxTerm<'_>> = batch
        .iter()
        .enumerate()
        .filter(|(_, e)| e.example.label == Label::DemoUnconstrained)
        .map(|(index, e)| AuxTerm {
            index,
            eps: e.eps,
            weight: e.weight,
        })
        .collect();
    // A frozen backbone still reports the auxiliary terms.
    let terms = backbone_backward(
        &model.backbone,
        &xs,
        &enc,
        &aux,
        beta,
        g_mu.as_deref(),
        &mut grads.backbone,
        !model.freeze_backbone,
    )?;
    for (a, t) in aux.iter().zip(terms) {
        parts.rmse += a.weight * t.rmse;
        parts.kl_term += a.weight * beta * t.kl;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintLoss {
    pub loss: f64,
    pub grads: ConstraintGrads,
    pub parts: ConstraintParts,
}

/// Full loss with per-class weights. `demo_noise[i]` is the
/// reparameterization noise for `demo_batch[i]`.
pub fn constraint_loss_weighted(
    model: &ConstraintModel,
    demo_batch: &[LabeledExample],
    planner_batch: &[LabeledExample],
    beta: f64,
    demo_noise: &[Vec<f64>],
    weights: ClassWeights,
) -> Result<ConstraintLoss> {
    if !(beta >= 0.0) {
        return Err(domain("beta must be non-negative"));
    }
    if demo_noise.len() != demo_batch.len() {
        return Err(domain("one noise vector per demo example is required"));
    }
    if demo_batch.iter().any(|e| e.label != Label::DemoUnconstrained)
        || planner_batch.iter().any(|e| e.label != Label::PlannerConstrained)
    {
        return Err(domain("batch holds an example of the other class"));
    }
    let entries: Vec<BatchEntry<'_>> = demo_batch
        .iter()
        .zip(demo_noise)
        .map(|(example, eps)| BatchEntry {
            example,
            eps,
            weight: weights.demo,
        })
        .chain(planner_batch.iter().map(|example| BatchEntry {
            example,
            eps: &[],
            weight: weights.planner,
        }))
        .collect();
    let mut grads = model.zero_grads();
    let parts = batch_loss(model, &entries, beta, &mut grads)?;
    let loss = parts.total();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite constraint loss".into()));
    }
    Ok(ConstraintLoss { loss, grads, parts })
}

/// Unweighted loss: sums over both batches.
pub fn constraint_loss(
    model: &ConstraintModel,
    demo_batch: &[LabeledExample],
    planner_batch: &[LabeledExample],
    beta: f64,
    demo_noise: &[Vec<f64>],
) -> Result<ConstraintLoss> {
    constraint_loss_weighted(model, demo_batch, planner_batch, beta, demo_noise, ClassWeights::default())
}

/// Boolean grid over candidate ego offsets; `true` means drivable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    /// Longitudinal offsets index rows, lateral offsets index columns.
    pub rows: usize,
    pub cols: usize,
    pub drivable: Vec<bool>,
}

impl RegionMask {
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.drivable[row * self.cols + col]
    }

    pub fn to_plane(&self) -> Vec<f64> {
        self.drivable.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Scene context for drivable-region queries.
#[derive(Debug, Clone, Copy)]
pub struct RegionContext<'a> {
    pub snapshot: &'a [VehicleState],
    pub road: &'a RoadSpec,
    pub ego: &'a VehicleState,
}

/// Evaluates the constraint at every `(ds, dd)` offset of the ego. Each
/// query re-centers the grid on the shifted ego and uses a
/// constant-velocity action window.
pub fn drivable_region(
    model: &ConstraintModel,
    ctx: &RegionContext<'_>,
    s_offsets: &[f64],
    d_offsets: &[f64],
    pairing: &Pairing,
    dt: f64,
) -> Result<RegionMask> {
    let (lat_cov, lon_cov) = pairing.grid.coverage();
    if s_offsets.iter().any(|o| o.abs() > 0.5 * lon_cov) || d_offsets.iter().any(|o| o.abs() > 0.5 * lat_cov) {
        return Err(domain("offsets must lie within the grid coverage"));
    }
    let mut buf = vec![0.0; pairing.pair_len()];
    let mut drivable = Vec::with_capacity(s_offsets.len() * d_offsets.len());
    for &ds in s_offsets {
        for &dd in d_offsets {
            let mut ego = *ctx.ego;
            ego.s += ds;
            ego.d += dd;
            ego.v_d = 0.0;
            ego.lane_id = lane_of(ctx.road, ego.d);
            let window: Vec<Pose> = (0..=pairing.window_steps)
                .map(|k| {
                    let t = k as f64 * dt;
                    Pose {
                        s: ego.s + ego.v_s * t,
                        d: ego.d,
                        t,
                        v_s: ego.v_s,
                        v_d: 0.0,
                    }
                })
                .collect();
            crate::ogm::encode_pair_into(&mut buf, ctx.snapshot, ctx.road, &ego, &window, &pairing.grid)?;
            drivable.push(!model.is_constrained(&buf)?);
        }
    }
    Ok(RegionMask {
        rows: s_offsets.len(),
        cols: d_offsets.len(),
        drivable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{Backbone, VaeConfig};

    fn vae() -> VaeModel {
        VaeModel::new(
            &[7, 4, 4],
            &VaeConfig {
                backbone: Backbone::Mlp { hidden: 8 },
                latent_dim: 3,
                seed: 2,
            },
        )
        .unwrap()
    }

    fn image(k: f64) -> Tensor {
        Tensor::from_vec(&[7, 4, 4], (0..112).map(|i| ((i as f64) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn init_classifies_at_prior() {
        let v = vae();
        for prior in [0.1, 0.5, 0.9] {
            let cm = init_from_vae(&v, prior, 1).unwrap();
            for k in [0.1, 0.7, 1.3] {
                assert!((cm.classify(&image(k).data).unwrap() - prior).abs() < 1e-12);
            }
            assert!(cm.backbone.same_parameters(&v));
        }
        assert!(init_from_vae(&v, 1.0, 1).is_err());
    }

    #[test]
    fn threshold_semantics() {
        let v = vae();
        let mut cm = init_from_vae(&v, 0.5, 1).unwrap();
        let x = image(0.3);
        assert!(!cm.is_constrained(&x.data).unwrap());
        cm.decision_threshold = 0.4;
        assert!(cm.is_constrained(&x.data).unwrap());
        let mut hi = init_from_vae(&v, 0.999_999, 1).unwrap();
        hi.decision_threshold = 1.0;
        assert!(!hi.is_constrained(&x.data).unwrap());
        assert!(cm.classify(&[0.0; 3]).is_err());
    }

    #[test]
    fn planner_term_at_half() {
        let cm = init_from_vae(&vae(), 0.5, 1).unwrap();
        let ex = LabeledExample {
            image: image(0.2),
            label: Label::PlannerConstrained,
            instance_id: "a".into(),
            t: 0,
        };
        let out = constraint_loss(&cm, &[], &[ex], 1.0, &[]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-6);
        // no auxiliary terms without demos
        assert_eq!(out.parts.rmse, 0.0);
        assert!(out.grads.backbone.decoder.iter().all(|g| g.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_kinds() {
        let v = vae();
        let cm = init_from_vae(&v, 0.1, 4).unwrap();
        let mut bytes = Vec::new();
        cm.write_to(&mut bytes).unwrap();
        match read_checkpoint(&mut bytes.as_slice()).unwrap() {
            Checkpoint::Constraint(back) => assert!(back.same_parameters(&cm)),
            other => panic!("wrong kind {other:?}"),
        }
        let mut bytes = Vec::new();
        write_vae_checkpoint(&mut bytes, &v).unwrap();
        assert!(matches!(read_checkpoint(&mut bytes.as_slice()).unwrap(), Checkpoint::Vae(_)));
        assert!(read_checkpoint(&mut &b"nonsense!"[..]).is_err());
    }
}
