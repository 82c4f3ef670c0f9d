//! Python bindings. Tensors cross the boundary as `(shape, flat_values)` pairs
//! in `[c, h, w]` order.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fcvsr::checkpoint::Checkpoint;
use fcvsr::config::{LossConfig, ModelConfig, Preset, RunConfig};
use fcvsr::frequency::{dwt2, gaussian_bandpass_masks, MaskVariant};
use fcvsr::model::{param_breakdown, param_count, Fcvsr};
use fcvsr::{metrics, losses, Tensor};

type Flat = (Vec<usize>, Vec<f64>);

fn err(e: fcvsr::Error) -> PyErr {
    match e {
        fcvsr::Error::Io { .. } | fcvsr::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor<f64>> {
    Tensor::from_vec(&shape, data).map_err(err)
}

fn flat(t: &Tensor<f64>) -> Flat {
    (t.shape().to_vec(), t.data().to_vec())
}

fn model_config(preset: &str, channels: Option<usize>) -> PyResult<ModelConfig> {
    let p: Preset = preset.parse().map_err(err)?;
    let cfg = ModelConfig::preset(p);
    Ok(match channels {
        Some(c) => cfg.with_channels(c),
        None => cfg,
    })
}

/// A model with its parameters.
#[pyclass(unsendable)]
struct Model {
    config: RunConfig,
    model: Fcvsr,
    params: fcvsr::autograd::ParamStore<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset = "fcvsr-s", channels = None, seed = 0))]
    fn new(preset: &str, channels: Option<usize>, seed: u64) -> PyResult<Self> {
        let mut config = RunConfig::from_preset(preset.parse().map_err(err)?);
        config.model = model_config(preset, channels)?;
        config.train.seed = seed;
        let model = Fcvsr::new(&config.model).map_err(err)?;
        let params = model.init_params(seed);
        Ok(Self { config, model, params })
    }

    #[staticmethod]
    fn load(checkpoint_dir: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&checkpoint_dir).map_err(err)?;
        let model = Fcvsr::new(&ck.config.model).map_err(err)?;
        model.check_params(&ck.params).map_err(err)?;
        Ok(Self {
            config: ck.config,
            model,
            params: ck.params,
        })
    }

    fn save(&self, checkpoint_dir: PathBuf) -> PyResult<()> {
        Checkpoint {
            step: 0,
            variant: "baseline".into(),
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: None,
        }
        .save(&checkpoint_dir)
        .map_err(err)
    }

    #[getter]
    fn scale(&self) -> usize {
        self.config.model.scale
    }

    fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn config_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(err)
    }

    /// Super-resolves the centre of a 7-frame window.
    fn infer(&self, frames: Vec<Flat>) -> PyResult<Flat> {
        let frames = frames
            .into_iter()
            .map(|(s, d)| tensor(s, d).map(|t| t.cast::<f32>()))
            .collect::<PyResult<Vec<_>>>()?;
        let sr = self.model.infer(&self.params, &frames).map_err(err)?;
        Ok(flat(&sr.cast()))
    }

    /// Zeroes the reconstruction tail so outputs equal the bilinear upsample.
    fn zero_residual(&mut self) {
        for i in 0..self.params.len() {
            if self.params.names()[i].starts_with("rec.tail.") {
                self.params.value_mut(i).data_mut().fill(0.0);
            }
        }
    }
}

#[pyfunction]
#[pyo3(signature = (preset = "fcvsr", channels = None))]
fn parameter_breakdown(preset: &str, channels: Option<usize>) -> PyResult<Vec<(String, usize)>> {
    let cfg = model_config(preset, channels)?;
    let mut out: Vec<_> = param_breakdown(&cfg).map_err(err)?.into_iter().collect();
    out.push(("total".into(), param_count(&cfg).map_err(err)?));
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: Flat, b: Flat, peak: f64) -> PyResult<f64> {
    metrics::psnr(&tensor(a.0, a.1)?, &tensor(b.0, b.1)?, peak).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn ssim(a: Flat, b: Flat, peak: f64) -> PyResult<f64> {
    metrics::ssim(&tensor(a.0, a.1)?, &tensor(b.0, b.1)?, peak).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (sr, hr, eps = 1e-4))]
fn charbonnier(sr: Flat, hr: Flat, eps: f64) -> PyResult<f64> {
    losses::charbonnier(&tensor(sr.0, sr.1)?, &tensor(hr.0, hr.1)?, eps).map_err(err)
}

/// Returns `(spatial, l1, l2, fc, total)` with the default loss settings and the given alpha.
#[pyfunction]
#[pyo3(signature = (sr, hr, up, alpha = 1.0))]
fn total_loss(sr: Flat, hr: Flat, up: Flat, alpha: f64) -> PyResult<(f64, f64, f64, f64, f64)> {
    let cfg = LossConfig {
        alpha,
        ..LossConfig::default()
    };
    let b = losses::total_loss(&tensor(sr.0, sr.1)?, &tensor(hr.0, hr.1)?, &tensor(up.0, up.1)?, &cfg).map_err(err)?;
    Ok((b.spatial, b.l1, b.l2, b.fc, b.total))
}

/// Band-pass masks over the centered spectrum, one `(shape, values)` per band.
#[pyfunction]
#[pyo3(signature = (h, w, q, variant = "consecutive-difference"))]
fn bandpass_masks(h: usize, w: usize, q: usize, variant: &str) -> PyResult<Vec<Flat>> {
    let v: MaskVariant = variant.parse().map_err(err)?;
    let set = gaussian_bandpass_masks(h, w, q, v).map_err(err)?;
    Ok(set.masks.iter().map(flat).collect())
}

/// Haar subbands `(ll, lh, hl, hh)`.
#[pyfunction]
fn haar(x: Flat) -> PyResult<(Flat, Flat, Flat, Flat)> {
    let b = dwt2(&tensor(x.0, x.1)?).map_err(err)?;
    Ok((flat(&b.ll), flat(&b.lh), flat(&b.hl), flat(&b.hh)))
}

#[pymodule]
fn fcvsr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parameter_breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(charbonnier, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bandpass_masks, m)?)?;
    m.add_function(wrap_pyfunction!(haar, m)?)?;
    Ok(())
}
