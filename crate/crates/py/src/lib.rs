//! Python bindings: map access, path planning, sequence likelihoods, and
//! posterior inference.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use subgoals_core::collab::PosteriorSource;
use subgoals_core::gridworld::{load_map, Dest, GridMap, State};
use subgoals_core::inference::{
    copy_model, gibbs_infer, independent_model, logical_possibility_model, GibbsConfig,
};
use subgoals_core::likelihood::{
    enumerate_candidates, sequence_likelihood, StateSequence, SubgoalSequence,
};
use subgoals_core::planner::{generate_path, PlannerConfig, ValueCache};
use subgoals_core::CoreError;

fn to_py_err(e: CoreError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_dest(s: &str) -> PyResult<Dest> {
    s.parse()
        .map_err(|e: String| PyValueError::new_err(e))
}

fn to_states(path: Vec<(i32, i32)>) -> StateSequence {
    StateSequence::new(path.into_iter().map(State::from).collect())
}

/// A warehouse map plus its value-table cache.
#[pyclass(name = "Map")]
struct PyMap {
    map: GridMap,
    cache: ValueCache,
}

#[pymethods]
impl PyMap {
    /// The built-in canonical 11x13 warehouse.
    #[staticmethod]
    fn canonical() -> Self {
        PyMap {
            map: GridMap::canonical(),
            cache: ValueCache::new(),
        }
    }

    /// Parses a line-grid map document.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let map = load_map(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyMap {
            map,
            cache: ValueCache::new(),
        })
    }

    #[getter]
    fn width(&self) -> i32 {
        self.map.width
    }

    #[getter]
    fn height(&self) -> i32 {
        self.map.height
    }

    #[getter]
    fn starts(&self) -> Vec<(i32, i32)> {
        self.map.starts.iter().map(|&s| s.into()).collect()
    }

    fn item_cell(&self, id: u8) -> Option<(i32, i32)> {
        self.map.item_cell(id).map(Into::into)
    }

    fn dest_cell(&self, dest: &str) -> PyResult<(i32, i32)> {
        Ok(self.map.dest_cell(parse_dest(dest)?).into())
    }

    fn to_text(&self) -> String {
        self.map.to_text()
    }

    /// All candidate subgoal sequences for a destination, as keys like
    /// "2,8|B".
    fn candidates(&self, dest: &str) -> PyResult<Vec<String>> {
        Ok(enumerate_candidates(&self.map, parse_dest(dest)?)
            .iter()
            .map(|g| g.key())
            .collect())
    }

    /// Plans a path visiting `items` then `dest`. `beta=None` means the
    /// optimal policy (seeded tie-breaking); otherwise softmax.
    #[pyo3(signature = (items, dest, start, beta=None, seed=0))]
    fn plan_path(
        &self,
        items: Vec<u8>,
        dest: &str,
        start: (i32, i32),
        beta: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<(i32, i32)>> {
        let g = SubgoalSequence::new(items, parse_dest(dest)?).map_err(to_py_err)?;
        let cfg = match beta {
            Some(b) => PlannerConfig::softmax(b, seed),
            None => PlannerConfig::optimal(seed),
        };
        let path = generate_path(&self.map, &self.cache, &g, start.into(), &cfg)
            .map_err(to_py_err)?;
        Ok(path.states().iter().map(|&s| s.into()).collect())
    }

    /// Probability that a softmax agent pursuing `items` then `dest`
    /// produced the full path.
    #[pyo3(signature = (path, items, dest, beta=6.0))]
    fn likelihood(
        &self,
        path: Vec<(i32, i32)>,
        items: Vec<u8>,
        dest: &str,
        beta: f64,
    ) -> PyResult<f64> {
        let g = SubgoalSequence::new(items, parse_dest(dest)?).map_err(to_py_err)?;
        Ok(sequence_likelihood(
            &self.map,
            &self.cache,
            &to_states(path),
            &g,
            beta,
        ))
    }

    /// Posterior over candidate sequences given observed paths, as a dict
    /// keyed like "2,8|B". Models: crp, independent, logical, copy.
    #[pyo3(signature = (paths, dest, model="crp", alpha=0.015, beta=6.0, iterations=5000, burn_in=1000, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn infer(
        &self,
        paths: Vec<Vec<(i32, i32)>>,
        dest: &str,
        model: &str,
        alpha: f64,
        beta: f64,
        iterations: usize,
        burn_in: usize,
        seed: u64,
    ) -> PyResult<BTreeMap<String, f64>> {
        let dest = parse_dest(dest)?;
        let paths: Vec<StateSequence> = paths.into_iter().map(to_states).collect();
        let source = PosteriorSource::parse(model).map_err(to_py_err)?;
        let table = match source {
            PosteriorSource::Crp => {
                let cfg = GibbsConfig {
                    alpha,
                    beta,
                    iterations,
                    burn_in,
                    seed,
                };
                gibbs_infer(&self.map, &self.cache, &paths, dest, &cfg)
                    .map_err(to_py_err)?
                    .posterior
            }
            PosteriorSource::Independent => {
                independent_model(&self.map, &self.cache, &paths, dest, beta).map_err(to_py_err)?
            }
            PosteriorSource::Logical => {
                logical_possibility_model(&self.map, &paths, dest).map_err(to_py_err)?
            }
            PosteriorSource::Copy => {
                copy_model(&self.map, &self.cache, &paths, dest, beta).map_err(to_py_err)?
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "model {other} is not an inference model"
                )));
            }
        };
        Ok(table.iter().map(|(g, p)| (g.key(), p)).collect())
    }
}

#[pymodule]
fn subgoals_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMap>()?;
    Ok(())
}
