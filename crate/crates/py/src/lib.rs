//! Python bindings. Structured results cross the boundary as JSON text.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use reflect_core::error::Error;
use reflect_core::experiment::{build_corpus, ExperimentConfig};
use reflect_core::forge::Corpus;
use reflect_core::geometry::{iou as core_iou, BBox};
use reflect_core::policy::{FeatureSpec, InstanceFeatures, PolicyParams};
use reflect_core::rewards::{
    group_advantages as core_advantages, score, CausalStage, RewardWeights,
};
use reflect_core::rng::Streams;
use reflect_core::scm::{CausalWorld, GroundedInstance, Regime};
use reflect_core::train::run_pipeline;
use reflect_core::trajectory::{parse, TokenId, Vocabulary};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_)
        | Error::Schema(_)
        | Error::InvalidBox(_)
        | Error::DegenerateBox(_)
        | Error::TokenOutOfRange(_)
        | Error::UnknownRegime(_) => PyValueError::new_err(format!("{}: {e}", e.kind())),
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "World", from_py_object)]
#[derive(Clone)]
struct PyWorld {
    inner: CausalWorld,
    vocab: Vocabulary,
}

#[pymethods]
impl PyWorld {
    /// Default world, or one described by a JSON object.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let inner: CausalWorld = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => CausalWorld::default(),
        };
        inner.validate().map_err(py_err)?;
        let vocab = Vocabulary::for_world(&inner);
        Ok(Self { inner, vocab })
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Sample instance `index` of `regime` ("observational", "do_a", "do_p") as JSON.
    fn sample(&self, regime: &str, seed: u64, index: u64) -> PyResult<String> {
        let r: Regime = regime.parse().map_err(py_err)?;
        let inst = self
            .inner
            .sample_keyed(r, &Streams::new(seed), "py", index)
            .map_err(py_err)?;
        to_json(&inst)
    }

    /// Gold token sequence (causal stage, verify stage, answer) of a sampled instance.
    fn gold_tokens(&self, instance_json: &str) -> PyResult<Vec<TokenId>> {
        let inst: GroundedInstance = serde_json::from_str(instance_json)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let chain = self.vocab.encode_chain(&inst.gt_chain).map_err(py_err)?;
        let mut t = vec![Vocabulary::CAUSAL];
        t.extend(&chain);
        t.push(Vocabulary::VERIFY);
        t.extend(&chain);
        t.extend([
            Vocabulary::ANSWER,
            self.vocab.diag_id(inst.gt_diag),
            Vocabulary::EOS,
        ]);
        Ok(t)
    }

    fn detokenize(&self, tokens: Vec<TokenId>) -> String {
        self.vocab.detokenize(&tokens)
    }

    /// Parsed trajectory (spans, steps, answer, well-formedness) as JSON.
    fn parse(&self, tokens: Vec<TokenId>) -> PyResult<String> {
        to_json(&parse(&tokens, &self.vocab))
    }

    /// Reward components of a token sequence under a named preset.
    #[pyo3(signature = (tokens, gold_y, preset="balanced"))]
    fn score(&self, tokens: Vec<TokenId>, gold_y: usize, preset: &str) -> PyResult<String> {
        let w = RewardWeights::preset(preset).map_err(py_err)?;
        let t = parse(&tokens, &self.vocab);
        to_json(&score(
            &t,
            gold_y,
            &self.inner,
            &self.vocab,
            w,
            CausalStage::VerifyWithFallback,
        ))
    }

    /// Log-probability of `tokens` under an all-zero policy.
    fn uniform_logprob(&self, instance_json: &str, tokens: Vec<TokenId>) -> PyResult<f64> {
        let inst: GroundedInstance = serde_json::from_str(instance_json)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let spec = FeatureSpec::new(&self.inner, &self.vocab);
        let p = PolicyParams::zeros(spec).map_err(py_err)?;
        let f = InstanceFeatures::new(&spec, &self.vocab, &inst).map_err(py_err)?;
        p.sequence_logprob(&f, &tokens, &self.vocab).map_err(py_err)
    }
}

/// IoU of two half-open cell boxes `(x_min, y_min, x_max, y_max)`.
#[pyfunction]
fn iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> PyResult<f64> {
    core_iou(
        &BBox::new(a.0, a.1, a.2, a.3),
        &BBox::new(b.0, b.1, b.2, b.3),
    )
    .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (rewards, eps=1e-8))]
fn group_advantages(rewards: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    Ok(core_advantages(&rewards, eps).map_err(py_err)?.advantages)
}

fn config(toml_text: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml_text {
        Some(t) => ExperimentConfig::from_toml(t).map_err(py_err),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Forge the corpus of an experiment config and return it as JSONL.
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn forge(config_toml: Option<&str>) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let c = build_corpus(&cfg).map_err(py_err)?;
    let bytes = c.to_jsonl().map_err(py_err)?;
    String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Number of variants per family in a JSONL corpus.
#[pyfunction]
fn corpus_counts(jsonl: &str) -> PyResult<(usize, usize, usize)> {
    let c = Corpus::from_jsonl(jsonl).map_err(py_err)?;
    let n = |name: &str| c.variants.iter().filter(|v| v.tag.name() == name).count();
    Ok((n("causal"), n("shortcut"), n("partial")))
}

/// Run the full pipeline for a config; returns the final evaluation report as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn train(py: Python<'_>, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let report = py
        .detach(|| {
            let corpus = build_corpus(&cfg)?;
            let vocab = Vocabulary::for_world(&cfg.world);
            let pipeline = cfg.effective_pipeline()?;
            let out = run_pipeline(
                &pipeline,
                &cfg.world,
                &corpus,
                &vocab,
                &cfg.streams(),
                &cfg.hash(),
            )?;
            Ok::<_, Error>(out.final_report().cloned())
        })
        .map_err(py_err)?;
    to_json(&report)
}

#[pymodule]
fn causal_reflect(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(forge, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_counts, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
