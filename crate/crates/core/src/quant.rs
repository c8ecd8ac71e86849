//! 8-bit affine fake quantization with MinMax observers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ann::arch::NetworkSpec;
use crate::ann::network::BranchyNetwork;
use crate::ann::train::{eval_ann, EpochMetrics, TrainConfig, Trainer};
use crate::data::{Dataset, CLASSES};
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Signed, zero point 0, range `[-127, 127]` (weights).
    Symmetric,
    /// Unsigned, range `[0, 255]` (activations).
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i32,
    pub mode: QuantMode,
    pub bits: u8,
}

impl QParams {
    pub fn new(scale: f64, zero_point: i32, mode: QuantMode) -> Result<Self> {
        let qp = QParams {
            scale,
            zero_point,
            mode,
            bits: 8,
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("quantization scale must be positive, got {scale}")));
        }
        if zero_point < qp.qmin() || zero_point > qp.qmax() || (mode == QuantMode::Symmetric && zero_point != 0) {
            return Err(Error::Domain(format!("zero point {zero_point} invalid for {mode:?}")));
        }
        Ok(qp)
    }

    pub fn qmin(&self) -> i32 {
        match self.mode {
            QuantMode::Symmetric => -127,
            QuantMode::Asymmetric => 0,
        }
    }

    pub fn qmax(&self) -> i32 {
        match self.mode {
            QuantMode::Symmetric => 127,
            QuantMode::Asymmetric => 255,
        }
    }

    /// Integer code of `x`, rounding half to even.
    pub fn quantize(&self, x: f64) -> i32 {
        let q = (x / self.scale + self.zero_point as f64).round_ties_even();
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    /// Representable interval `[lo, hi]`.
    pub fn range(&self) -> (f64, f64) {
        (self.dequantize(self.qmin()), self.dequantize(self.qmax()))
    }

    pub fn fake(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// True where the straight-through estimator passes gradient.
    pub fn passes(&self, x: f64) -> bool {
        let q = x / self.scale + self.zero_point as f64;
        q >= self.qmin() as f64 - 0.5 && q <= self.qmax() as f64 + 0.5
    }
}

/// Running envelope of every value seen at one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxObserver {
    pub min: f64,
    pub max: f64,
    pub observations: u64,
}

impl Default for MinMaxObserver {
    fn default() -> Self {
        MinMaxObserver {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            observations: 0,
        }
    }
}

impl MinMaxObserver {
    pub fn observe(&mut self, values: &[f64]) -> Result<()> {
        let (mut lo, mut hi) = (self.min, self.max);
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Observation { site: String::new() });
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        self.min = lo;
        self.max = hi;
        self.observations += 1;
        Ok(())
    }

    pub fn has_observed(&self) -> bool {
        self.observations > 0 && self.min <= self.max
    }
}

/// Derives scale and zero point from an observer. The range is widened to
/// include 0 so that zero is always exactly representable; an empty range
/// (all zeros) gets scale 1 and zero point 0.
pub fn compute_qparams(obs: &MinMaxObserver, mode: QuantMode) -> Result<QParams> {
    if !obs.has_observed() {
        return Err(Error::Usage("observer has not seen any tensor".into()));
    }
    let (lo, hi) = (obs.min.min(0.0), obs.max.max(0.0));
    match mode {
        QuantMode::Symmetric => {
            let m = lo.abs().max(hi.abs());
            QParams::new(if m > 0.0 { m / 127.0 } else { 1.0 }, 0, mode)
        }
        QuantMode::Asymmetric => {
            if hi == lo {
                return QParams::new(1.0, 0, mode);
            }
            let scale = (hi - lo) / 255.0;
            let zp = (-lo / scale).round_ties_even().clamp(0.0, 255.0) as i32;
            QParams::new(scale, zp, mode)
        }
    }
}

pub fn fake_quant(x: &Tensor, qp: &QParams) -> Tensor {
    x.map(|v| qp.fake(v))
}

/// Fake-quantizes in place and returns the straight-through gradient mask.
pub fn fake_quant_with_mask(x: &mut Tensor, qp: &QParams) -> Vec<bool> {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            let pass = qp.passes(*v);
            *v = qp.fake(*v);
            pass
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSite {
    pub mode: QuantMode,
    pub observer: MinMaxObserver,
    pub qparams: Option<QParams>,
}

/// Quantization sites of a network: one per synaptic weight tensor and one
/// per ReLU output. Sites are named `backbone.{i}.weight`, `exit{e}.{i}.act`, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub enabled: bool,
    pub frozen: bool,
    pub sites: BTreeMap<String, QuantSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QParamRow {
    pub site: String,
    pub scale: f64,
    pub zero_point: i32,
    pub mode: QuantMode,
}

pub fn weight_site(prefix: &str, i: usize) -> String {
    format!("{prefix}.{i}.weight")
}

pub fn act_site(prefix: &str, i: usize) -> String {
    format!("{prefix}.{i}.act")
}

pub fn head_prefix(exit: usize) -> String {
    format!("exit{exit}")
}

impl QuantState {
    pub fn for_network(spec: &NetworkSpec) -> Self {
        let mut sites = BTreeMap::new();
        let mut add = |prefix: &str, layers: &[Layer]| {
            for (i, layer) in layers.iter().enumerate() {
                let entry = match layer {
                    Layer::Linear(_) | Layer::Conv2d(_) => Some((weight_site(prefix, i), QuantMode::Symmetric)),
                    Layer::Relu => Some((act_site(prefix, i), QuantMode::Asymmetric)),
                    _ => None,
                };
                if let Some((name, mode)) = entry {
                    sites.insert(
                        name,
                        QuantSite {
                            mode,
                            observer: MinMaxObserver::default(),
                            qparams: None,
                        },
                    );
                }
            }
        };
        add("backbone", &spec.backbone);
        for (e, exit) in spec.exits.iter().enumerate() {
            add(&head_prefix(e), &exit.head);
        }
        QuantState {
            enabled: true,
            frozen: false,
            sites,
        }
    }

    /// Current parameters of a site: frozen values, or those implied by the
    /// observer so far.
    pub fn qparams(&self, site: &str) -> Result<Option<QParams>> {
        let Some(s) = self.sites.get(site) else {
            return Ok(None);
        };
        match s.qparams {
            Some(qp) if self.frozen => Ok(Some(qp)),
            _ if s.observer.has_observed() => compute_qparams(&s.observer, s.mode).map(Some),
            _ => Ok(None),
        }
    }

    /// Observes `values` at `site` unless frozen.
    pub fn observe(&mut self, site: &str, values: &[f64]) -> Result<()> {
        if self.frozen || !self.enabled {
            return Ok(());
        }
        if let Some(s) = self.sites.get_mut(site) {
            s.observer.observe(values).map_err(|_| Error::Observation { site: site.into() })?;
        }
        Ok(())
    }

    /// Fake-quantized copy of a weight tensor, or `None` when quantization is off.
    pub fn weight(&mut self, site: &str, w: &Tensor, observe: bool) -> Result<Option<Tensor>> {
        if !self.enabled {
            return Ok(None);
        }
        if observe {
            self.observe(site, w.data())?;
        }
        Ok(self.qparams(site)?.map(|qp| fake_quant(w, &qp)))
    }

    /// Fake-quantizes an activation in place; returns the STE mask.
    pub fn activation(&mut self, site: &str, y: &mut Tensor, observe: bool) -> Result<Option<Vec<bool>>> {
        if !self.enabled {
            return Ok(None);
        }
        if observe {
            self.observe(site, y.data())?;
        }
        Ok(self.qparams(site)?.map(|qp| fake_quant_with_mask(y, &qp)))
    }

    /// Read-only variant for inference; requires frozen parameters to be present.
    pub fn apply_weight(&self, site: &str, w: &Tensor) -> Result<Option<Tensor>> {
        if !self.enabled {
            return Ok(None);
        }
        Ok(self.qparams(site)?.map(|qp| fake_quant(w, &qp)))
    }

    pub fn apply_activation(&self, site: &str, y: &mut Tensor) -> Result<()> {
        if self.enabled {
            if let Some(qp) = self.qparams(site)? {
                fake_quant_with_mask(y, &qp);
            }
        }
        Ok(())
    }

    /// Fixes every site's parameters at their current observer values.
    pub fn freeze(&mut self) -> Result<()> {
        for (name, s) in self.sites.iter_mut() {
            if !s.observer.has_observed() {
                return Err(Error::Usage(format!("quant site {name} was never observed")));
            }
            s.qparams = Some(compute_qparams(&s.observer, s.mode)?);
        }
        self.frozen = true;
        Ok(())
    }

    pub fn table(&self) -> Vec<QParamRow> {
        self.sites
            .iter()
            .filter_map(|(name, s)| {
                s.qparams.map(|qp| QParamRow {
                    site: name.clone(),
                    scale: qp.scale,
                    zero_point: qp.zero_point,
                    mode: qp.mode,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatConfig {
    /// Epochs trained with observers live before they are frozen.
    pub calibration_epochs: usize,
    pub finetune_epochs: usize,
    pub train: TrainConfig,
    /// Samples used for the post-calibration collapse check.
    pub check_samples: usize,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            calibration_epochs: 1,
            finetune_epochs: 3,
            train: TrainConfig {
                lr: 1e-4,
                ..TrainConfig::default()
            },
            check_samples: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatReport {
    pub epochs: Vec<EpochMetrics>,
    /// Final-exit accuracy on the check subset right after freezing.
    pub post_calibration_accuracy: f64,
    pub warnings: Vec<String>,
    pub qparams: Vec<QParamRow>,
}

/// Quantization-aware fine-tuning: attach fake quantization to every site,
/// train with live MinMax observers for the calibration epochs, freeze all
/// observers, then keep training against the frozen grids.
pub fn qat_finetune(net: &mut BranchyNetwork, ds: &Dataset, cfg: &QatConfig) -> Result<QatReport> {
    if cfg.calibration_epochs == 0 {
        return Err(Error::Config("QAT needs at least one calibration epoch".into()));
    }
    let mut tcfg = cfg.train.clone();
    tcfg.epochs = cfg.calibration_epochs + cfg.finetune_epochs;
    net.quant = Some(QuantState::for_network(&net.spec));
    let mut trainer = Trainer::new(net, &tcfg, ds.len())?;
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for _ in 0..cfg.calibration_epochs {
        epochs.push(trainer.epoch(net, ds, true)?);
    }
    net.quant.as_mut().expect("quant state attached").freeze()?;

    let check = ds.head(cfg.check_samples.min(ds.len()));
    let post_calibration_accuracy = eval_ann(net, &check)?.final_accuracy();
    let mut warnings = Vec::new();
    let floor = 1.0 / CLASSES as f64 + 0.1;
    if post_calibration_accuracy < floor {
        warnings.push(format!(
            "accuracy_collapse: {post_calibration_accuracy:.4} after calibration is below chance + 10% ({floor:.2})"
        ));
    }
    for _ in 0..cfg.finetune_epochs {
        epochs.push(trainer.epoch(net, ds, false)?);
    }
    Ok(QatReport {
        epochs,
        post_calibration_accuracy,
        warnings,
        qparams: net.quant.as_ref().expect("quant state attached").table(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(values: &[&[f64]]) -> MinMaxObserver {
        let mut o = MinMaxObserver::default();
        for v in values {
            o.observe(v).unwrap();
        }
        o
    }

    #[test]
    fn observer_envelope() {
        let o = obs(&[&[1.0, 2.0], &[-3.0, 0.0]]);
        assert_eq!((o.min, o.max), (-3.0, 2.0));
        let o = obs(&[&[5.0]]);
        assert_eq!((o.min, o.max), (5.0, 5.0));
        let o = obs(&[&[0.0, 0.0]]);
        assert_eq!((o.min, o.max), (0.0, 0.0));
        let mut o = MinMaxObserver::default();
        assert!(matches!(o.observe(&[f64::NAN]), Err(Error::Observation { .. })));
    }

    #[test]
    fn qparams_formulas() {
        let s = compute_qparams(&obs(&[&[-1.0, 1.0]]), QuantMode::Symmetric).unwrap();
        assert_eq!(s.scale, 1.0 / 127.0);
        assert_eq!(s.zero_point, 0);
        let a = compute_qparams(&obs(&[&[0.0, 2.55]]), QuantMode::Asymmetric).unwrap();
        assert!((a.scale - 0.01).abs() < 1e-15);
        assert_eq!(a.zero_point, 0);
        let a = compute_qparams(&obs(&[&[-1.0, 1.0]]), QuantMode::Asymmetric).unwrap();
        assert_eq!(a.zero_point, 128);
        assert!(compute_qparams(&MinMaxObserver::default(), QuantMode::Symmetric).is_err());
    }

    #[test]
    fn degenerate_zero_range() {
        for mode in [QuantMode::Symmetric, QuantMode::Asymmetric] {
            let qp = compute_qparams(&obs(&[&[0.0]]), mode).unwrap();
            assert_eq!(qp.scale, 1.0);
            assert_eq!(qp.fake(0.0), 0.0);
        }
    }

    #[test]
    fn fake_quant_cases() {
        let qp = QParams::new(0.1, 0, QuantMode::Symmetric).unwrap();
        assert_eq!(qp.fake(0.0), 0.0);
        let on_grid = qp.dequantize(7);
        assert_eq!(qp.fake(on_grid), on_grid);
        // half-even tie rule
        let unit = QParams::new(1.0, 0, QuantMode::Symmetric).unwrap();
        assert_eq!(unit.fake(2.5), 2.0);
        assert_eq!(unit.fake(3.5), 4.0);
        assert_eq!(unit.fake(500.0), 127.0);
        assert!(!unit.passes(500.0));
        assert!(unit.passes(127.4));
    }

    #[test]
    fn invalid_qparams_rejected() {
        assert!(QParams::new(0.0, 0, QuantMode::Symmetric).is_err());
        assert!(QParams::new(1.0, 3, QuantMode::Symmetric).is_err());
        assert!(QParams::new(1.0, 256, QuantMode::Asymmetric).is_err());
    }
}
