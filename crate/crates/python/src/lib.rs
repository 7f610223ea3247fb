//! Python bindings: templates, minutiae, galleries, exact / PQ search,
//! minutiae re-ranking and the synthetic benchmark generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fpcore::gallery::{GalleryRecord, RecordKey};
use fpcore::minutiae::{DecodeOptions, EncodeOptions, Minutia};
use fpcore::pq::TrainConfig;
use fpcore::rerank::{FusionConfig, Normalization, Retriever, Stage1};
use fpcore::search::CandidateList;
use fpcore::synth::SynthConfig;

fn err(e: fpcore::Error) -> PyErr {
    match e {
        fpcore::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn default_shards() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// A unit-norm 192-d template.
#[pyclass(frozen, skip_from_py_object, module = "fpindex")]
#[derive(Clone)]
struct Template(fpcore::template::Template);

#[pymethods]
impl Template {
    /// Normalizes `features` to unit length.
    #[new]
    fn new(features: Vec<f32>) -> PyResult<Self> {
        fpcore::template::Template::from_unnormalized(features)
            .map(Self)
            .map_err(err)
    }

    /// Decompresses a 200-byte compressed template.
    #[staticmethod]
    fn from_compressed(data: &[u8]) -> PyResult<Self> {
        let c = fpcore::template::CompressedTemplate::from_bytes(data).map_err(err)?;
        Ok(Self(c.decompress()))
    }

    fn features(&self) -> Vec<f32> {
        self.0.as_slice().to_vec()
    }

    /// The 200-byte compressed form.
    fn compress<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.compress().to_bytes())
    }

    fn __len__(&self) -> usize {
        fpcore::template::DIM
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyfunction]
fn cosine_score(a: &Template, b: &Template) -> f64 {
    fpcore::template::cosine_score(&a.0, &b.0).value
}

/// Cosine computed directly on two compressed templates.
#[pyfunction]
fn integer_score(a: &[u8], b: &[u8]) -> PyResult<f64> {
    let a = fpcore::template::CompressedTemplate::from_bytes(a).map_err(err)?;
    let b = fpcore::template::CompressedTemplate::from_bytes(b).map_err(err)?;
    Ok(fpcore::template::integer_score(&a, &b).value)
}

/// Minutiae `(x, y, theta)` in a `width x height` frame.
#[pyclass(frozen, skip_from_py_object, module = "fpindex")]
#[derive(Clone)]
struct MinutiaeSet(fpcore::minutiae::MinutiaeSet);

#[pymethods]
impl MinutiaeSet {
    #[new]
    #[pyo3(signature = (width, height, minutiae = Vec::new()))]
    fn new(width: u32, height: u32, minutiae: Vec<(f32, f32, f32)>) -> PyResult<Self> {
        let ms = minutiae
            .into_iter()
            .map(|(x, y, t)| Minutia::new(x, y, t))
            .collect();
        fpcore::minutiae::MinutiaeSet::new(width, height, ms)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn minutiae(&self) -> Vec<(f32, f32, f32)> {
        self.0.minutiae().iter().map(|m| (m.x, m.y, m.theta)).collect()
    }

    fn scale_to(&self, width: u32, height: u32) -> PyResult<Self> {
        self.0.scale_to(width, height).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("MinutiaeSet({}x{}, {} minutiae)", self.0.width(), self.0.height(), self.0.len())
    }
}

#[pyfunction]
fn minutiae_score(a: &MinutiaeSet, b: &MinutiaeSet) -> f64 {
    fpcore::matcher::minutiae_score(&a.0, &b.0, &Default::default())
}

/// Six-channel minutiae heatmap.
#[pyclass(frozen, module = "fpindex")]
struct MinutiaeMap(fpcore::minutiae::MinutiaeMap);

#[pymethods]
impl MinutiaeMap {
    #[staticmethod]
    #[pyo3(signature = (minutiae, size = fpcore::minutiae::MAP_SIZE, sigma = fpcore::minutiae::DEFAULT_SIGMA))]
    fn encode(minutiae: &MinutiaeSet, size: u32, sigma: f64) -> PyResult<Self> {
        let opts = EncodeOptions {
            map_width: size,
            map_height: size,
            sigma_s: sigma,
            ..EncodeOptions::default()
        };
        fpcore::minutiae::encode_map(&minutiae.0, &opts)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        fpcore::minutiae::MinutiaeMap::from_bytes(data)
            .map(Self)
            .map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    /// Minutiae at the local peaks, in map coordinates.
    #[pyo3(signature = (threshold = fpcore::minutiae::DEFAULT_PEAK_THRESHOLD, radius = fpcore::minutiae::DEFAULT_NMS_RADIUS))]
    fn decode(&self, threshold: f64, radius: f64) -> PyResult<MinutiaeSet> {
        let opts = DecodeOptions {
            peak_threshold: threshold,
            nms_radius: radius,
        };
        fpcore::minutiae::decode_map(&self.0, &opts)
            .map(MinutiaeSet)
            .map_err(err)
    }

    /// Values in `[y][x][channel]` order.
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    #[getter]
    fn shape(&self) -> (u32, u32, usize) {
        (self.0.height(), self.0.width(), fpcore::minutiae::CHANNELS)
    }
}

/// Enrolled records in ordinal order.
#[pyclass(skip_from_py_object, module = "fpindex")]
#[derive(Clone, Default)]
struct Gallery(fpcore::gallery::Gallery);

#[pymethods]
impl Gallery {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        fpcore::gallery::Gallery::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    /// Returns the new record's ordinal.
    #[pyo3(signature = (subject_id, finger, template, minutiae = None))]
    fn enroll(
        &mut self,
        subject_id: String,
        finger: u8,
        template: &Template,
        minutiae: Option<&MinutiaeSet>,
    ) -> PyResult<usize> {
        let key = RecordKey::new(subject_id, finger).map_err(err)?;
        self.0
            .enroll(GalleryRecord {
                key,
                template: template.0.compress(),
                minutiae: minutiae.map(|m| m.0.clone()),
            })
            .map_err(err)
    }

    fn keys(&self) -> Vec<(String, u8)> {
        self.0
            .iter()
            .map(|r| (r.key.subject_id.clone(), r.key.finger_index))
            .collect()
    }

    fn template(&self, ordinal: usize) -> PyResult<Template> {
        self.0
            .get(ordinal)
            .map(|r| Template(r.template.decompress()))
            .ok_or_else(|| PyValueError::new_err("ordinal out of range"))
    }

    fn minutiae(&self, ordinal: usize) -> PyResult<Option<MinutiaeSet>> {
        self.0
            .get(ordinal)
            .map(|r| r.minutiae.clone().map(MinutiaeSet))
            .ok_or_else(|| PyValueError::new_err("ordinal out of range"))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Trained product quantizer with one code per gallery record.
#[pyclass(frozen, skip_from_py_object, module = "fpindex")]
#[derive(Clone)]
struct PqIndex(fpcore::pq::PqIndex);

#[pymethods]
impl PqIndex {
    #[staticmethod]
    #[pyo3(signature = (gallery, m = 64, z = 256, seed = 0))]
    fn train(py: Python<'_>, gallery: &Gallery, m: usize, z: usize, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig {
            m,
            z,
            seed,
            max_training_points: Some(256 * z),
            ..TrainConfig::default()
        };
        let g = &gallery.0;
        py.detach(|| fpcore::pq::PqIndex::build_from_gallery(g, &cfg))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        fpcore::pq::PqIndex::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn code_bytes(&self) -> usize {
        self.0.quantizer().code_bytes()
    }

    /// Squared distance from `probe` to every record's reconstruction.
    fn distances(&self, probe: &Template) -> Vec<f64> {
        self.0.distances(&probe.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

type Row = (usize, String, u8, f64);

fn rows(list: CandidateList) -> Vec<Row> {
    list.items
        .into_iter()
        .map(|c| (c.ordinal, c.key.subject_id, c.key.finger_index, c.score.value))
        .collect()
}

/// Exhaustive and PQ top-k search over a gallery, with optional minutiae
/// re-ranking. Results are `(ordinal, subject_id, finger, score)` best first.
#[pyclass(frozen, module = "fpindex")]
struct Searcher {
    gallery: fpcore::gallery::Gallery,
    exact: fpcore::search::SearchIndex,
    pq: Option<fpcore::pq::PqIndex>,
    shards: usize,
}

#[pymethods]
impl Searcher {
    #[new]
    #[pyo3(signature = (gallery, pq = None, shards = None))]
    fn new(gallery: &Gallery, pq: Option<&PqIndex>, shards: Option<usize>) -> PyResult<Self> {
        if let Some(p) = pq {
            if p.0.len() != gallery.0.len() {
                return Err(PyValueError::new_err(format!(
                    "index holds {} records but gallery has {}",
                    p.0.len(),
                    gallery.0.len()
                )));
            }
        }
        Ok(Self {
            exact: fpcore::search::SearchIndex::from_gallery(&gallery.0),
            gallery: gallery.0.clone(),
            pq: pq.map(|p| p.0.clone()),
            shards: shards.unwrap_or_else(default_shards).max(1),
        })
    }

    #[pyo3(signature = (probe, k = 10))]
    fn search(&self, py: Python<'_>, probe: &Template, k: usize) -> PyResult<Vec<Row>> {
        let t = &probe.0;
        py.detach(|| self.exact.search_topk(t, k, self.shards))
            .map(rows)
            .map_err(err)
    }

    #[pyo3(signature = (probe, k = 10))]
    fn pq_search(&self, py: Python<'_>, probe: &Template, k: usize) -> PyResult<Vec<Row>> {
        let pq = self
            .pq
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("searcher was built without a PQ index"))?;
        let t = &probe.0;
        py.detach(|| pq.search_topk(t, k, self.shards, &self.gallery))
            .map(rows)
            .map_err(err)
    }

    /// Two-stage search: top-k by template, re-ordered by template + minutiae score.
    #[pyo3(signature = (probe, minutiae, k = 500, normalization = "none", backend = "exact"))]
    fn rerank(
        &self,
        py: Python<'_>,
        probe: &Template,
        minutiae: &MinutiaeSet,
        k: usize,
        normalization: &str,
        backend: &str,
    ) -> PyResult<Vec<Row>> {
        let normalization = match normalization {
            "none" => Normalization::None,
            "minmax" => Normalization::MinMax,
            other => return Err(PyValueError::new_err(format!("unknown normalization {other:?}"))),
        };
        let backend = match backend {
            "exact" => Stage1::Exact,
            "pq" => Stage1::Pq,
            other => return Err(PyValueError::new_err(format!("unknown backend {other:?}"))),
        };
        let cfg = FusionConfig {
            k,
            normalization,
            backend,
            shards: self.shards,
            ..FusionConfig::default()
        };
        let (t, m) = (&probe.0, &minutiae.0);
        py.detach(|| {
            let r = Retriever::new(&self.gallery, Some(&self.exact), self.pq.as_ref())?;
            r.two_stage_search(t, m, &cfg)
        })
        .map(rows)
        .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.gallery.len()
    }
}

/// Synthetic gallery and probes. Returns `(gallery, probes)` where each probe
/// is `(template, minutiae, (mate_subject_id, mate_finger))`.
#[pyfunction]
#[pyo3(signature = (identities, probes = 100, seed = 0, noise_sigma = None, quality_spread = None))]
fn synth(
    py: Python<'_>,
    identities: usize,
    probes: usize,
    seed: u64,
    noise_sigma: Option<f64>,
    quality_spread: Option<f64>,
) -> PyResult<(Gallery, Vec<(Template, MinutiaeSet, (String, u8))>)> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        identities,
        probes,
        seed,
        noise_sigma: noise_sigma.unwrap_or(d.noise_sigma),
        quality_spread: quality_spread.unwrap_or(d.quality_spread),
        ..d
    };
    let data = py.detach(|| fpcore::synth::generate(&cfg)).map_err(err)?;
    let probes = data
        .probes
        .into_iter()
        .map(|p| {
            (
                Template(p.template),
                MinutiaeSet(p.minutiae),
                (p.mate.subject_id, p.mate.finger_index),
            )
        })
        .collect();
    Ok((Gallery(data.gallery), probes))
}

#[pymodule]
fn fpindex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Template>()?;
    m.add_class::<MinutiaeSet>()?;
    m.add_class::<MinutiaeMap>()?;
    m.add_class::<Gallery>()?;
    m.add_class::<PqIndex>()?;
    m.add_class::<Searcher>()?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(integer_score, m)?)?;
    m.add_function(wrap_pyfunction!(minutiae_score, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add("DIM", fpcore::template::DIM)?;
    Ok(())
}
