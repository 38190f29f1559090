//! Python bindings: world generation, pretraining, evaluation, rule
//! extraction and the bare random-walk transition.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oreo_core::crw::{crw_transition, DegreeWeights, EntityDistribution, RelationDistribution, RelationImportance};
use oreo_core::kg::{k_hop_subgraph, KnowledgeGraph, Triple};
use oreo_core::model::Model;
use oreo_core::numerics::Checkpoint;
use oreo_core::synth::{generate_to_dir, load_qa, Dataset, WorldSpec};
use oreo_core::train::{checkpoint_inverse_closure, evaluate_qa, extract_rules, train, GraphContext, TrainConfig};
use oreo_core::OreoError;

fn py_err(e: OreoError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn data_dir_of(qa: &Path) -> PathBuf {
    qa.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

/// Writes a synthetic world to `out`; `spec` is a TOML file or `None` for the default.
#[pyfunction]
#[pyo3(signature = (out, spec=None))]
fn generate<'py>(py: Python<'py>, out: PathBuf, spec: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let spec = match spec {
        Some(p) => WorldSpec::load(&p).map_err(py_err)?,
        None => WorldSpec::default(),
    };
    let d = generate_to_dir(&spec, &out).map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("entities", d.kg.num_entities())?;
    dict.set_item("relations", d.kg.num_relations())?;
    dict.set_item("edges", d.kg.num_edges())?;
    dict.set_item("passages", d.passages.len())?;
    dict.set_item("qa_train", d.qa_train.len())?;
    dict.set_item("qa_heldout", d.qa_heldout.len())?;
    Ok(dict)
}

/// Trains on `data` under the TOML `config` and saves a checkpoint; returns the loss curve.
#[pyfunction]
fn pretrain(py: Python<'_>, config: PathBuf, data: PathBuf, out: PathBuf) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let cfg = TrainConfig::load(&config)?;
        let d = Dataset::load(&data)?;
        let run = train(&cfg, &d)?;
        run.checkpoint()?.save(&out)?;
        Ok(run.history.iter().map(|r| r.loss.total).collect())
    })
    .map_err(py_err)
}

/// A trained checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    model: Model,
    inverse_closure: bool,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel {
            model: Model::from_checkpoint(&ckpt).map_err(py_err)?,
            inverse_closure: checkpoint_inverse_closure(&ckpt),
        })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.model.config().depth
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.model.num_entities()
    }

    /// Hits@1 on a question file, optionally with one relation's edges removed.
    #[pyo3(signature = (qa, remove_rel=None))]
    fn evaluate<'py>(&self, py: Python<'py>, qa: PathBuf, remove_rel: Option<String>) -> PyResult<Bound<'py, PyDict>> {
        let metrics = py
            .detach(|| {
                let d = Dataset::load(&data_dir_of(&qa))?;
                let items = load_qa(&qa)?;
                let mut ctx = GraphContext::new(&d.kg, self.inverse_closure)?;
                if let Some(r) = &remove_rel {
                    ctx = ctx.without_relation(r)?;
                }
                evaluate_qa(&self.model, &items, &ctx, &d.vocab)
            })
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("hits1", metrics.hits1())?;
        out.set_item("count", metrics.overall.count)?;
        let hops = PyDict::new(py);
        for (h, b) in &metrics.by_hops {
            hops.set_item(h, b.hits1)?;
        }
        let rels = PyDict::new(py);
        for (r, b) in &metrics.by_relation {
            rels.set_item(r, b.hits1)?;
        }
        out.set_item("by_hops", hops)?;
        out.set_item("by_relation", rels)?;
        Ok(out)
    }

    /// Per-step argmax relations after removing `rel`, with the step rankings.
    fn paths(&self, rel: String, qa: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<(String, f64)>>)> {
        let report = (|| {
            let d = Dataset::load(&data_dir_of(&qa))?;
            let items = load_qa(&qa)?;
            let ctx = GraphContext::new(&d.kg, self.inverse_closure)?.without_relation(&rel)?;
            extract_rules(&self.model, &rel, &items, &ctx, &d.vocab)
        })()
        .map_err(py_err)?;
        let steps = report
            .steps
            .iter()
            .map(|s| s.iter().map(|r| (r.name.clone(), r.prob)).collect())
            .collect();
        Ok((report.path, steps))
    }
}

/// One walk step over a whole graph given as `(src, rel, tgt)` triples.
#[pyfunction]
#[pyo3(signature = (num_entities, num_relations, triples, pi, gamma, weights=None))]
fn transition(
    num_entities: usize,
    num_relations: usize,
    triples: Vec<(usize, usize, usize)>,
    pi: Vec<f64>,
    gamma: Vec<f64>,
    weights: Option<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    (|| {
        let kg = KnowledgeGraph::from_triples(
            num_entities,
            num_relations,
            triples.into_iter().map(|(s, r, t)| Triple::new(s, r, t)),
        )?;
        let all: Vec<usize> = (0..num_entities).collect();
        let sub = k_hop_subgraph(&all, 1, &kg);
        let w = match weights {
            Some(w) => RelationImportance::from_weights(&w)?,
            None => RelationImportance::neutral(num_relations),
        };
        let out = crw_transition(
            &EntityDistribution::new(pi)?,
            &RelationDistribution::new(gamma)?,
            &sub,
            &DegreeWeights::from_graph(&kg),
            &w,
        )?;
        Ok(out.probs().to_vec())
    })()
    .map_err(py_err)
}

#[pymodule]
fn oreo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(transition, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
