//! Versioned JSON model files with a SHA-256 content checksum.
//!
//! The checksum covers the compact serialization of the `model` member. Floats
//! are written in shortest round-trip form and parsed exactly, so a reloaded
//! model is bitwise identical to the saved one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::lyapunov::Potential;
use crate::nets::{Activation, IcnnParams, MlpParams};
use crate::stablepolicy::{PolicyMode, ProjectionActivation, StablePolicyModel};

use super::Bounds;

pub const FORMAT_MAGIC: &str = "snds-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixDoc {
    fn from(m: &Matrix) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
    }
}

impl MatrixDoc {
    fn into_matrix(self, what: &str) -> Result<Matrix> {
        Matrix::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Format(format!("{what}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weight: MatrixDoc,
    bias: MatrixDoc,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct IcnnDoc {
    sizes: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
    input_weights: Vec<MatrixDoc>,
    recursion_raw: Vec<MatrixDoc>,
    biases: Vec<MatrixDoc>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    mode: PolicyMode,
    projection: ProjectionActivation,
    regularizer: f64,
    alpha: f64,
    delta: f64,
    target: Vec<f64>,
    bounds: Option<Bounds>,
    policy: PolicyDoc,
    icnn: IcnnDoc,
}

#[derive(Serialize, Deserialize)]
struct FileDoc {
    format: String,
    format_version: u32,
    checksum: String,
    model: ModelDoc,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    format_version: Option<u32>,
}

fn checksum(model: &ModelDoc) -> String {
    let body = serde_json::to_string(model).expect("model document serializes");
    hex::encode(Sha256::digest(body.as_bytes()))
}

fn to_doc(m: &StablePolicyModel) -> ModelDoc {
    ModelDoc {
        mode: m.mode,
        projection: m.projection,
        regularizer: m.regularizer,
        alpha: m.alpha,
        delta: m.lpf.delta,
        target: m.lpf.target.clone(),
        bounds: m.bounds.clone(),
        policy: PolicyDoc {
            sizes: m.policy.sizes.clone(),
            activation: m.policy.activation,
            layers: m
                .policy
                .weights
                .iter()
                .zip(&m.policy.biases)
                .map(|(w, b)| LayerDoc { weight: w.into(), bias: b.into() })
                .collect(),
        },
        icnn: IcnnDoc {
            sizes: m.lpf.icnn.sizes.clone(),
            hidden_activation: m.lpf.icnn.hidden_activation,
            output_activation: m.lpf.icnn.output_activation,
            input_weights: m.lpf.icnn.input_weights.iter().map(Into::into).collect(),
            recursion_raw: m.lpf.icnn.recursion_raw.iter().map(Into::into).collect(),
            biases: m.lpf.icnn.biases.iter().map(Into::into).collect(),
        },
    }
}

fn expect_shape(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Format(format!(
            "{what} has shape {:?}, layer sizes imply {:?}",
            m.dim(),
            (rows, cols)
        )));
    }
    Ok(())
}

fn from_doc(doc: ModelDoc) -> Result<StablePolicyModel> {
    let p = doc.policy;
    if p.sizes.len() < 2 || p.layers.len() != p.sizes.len() - 1 {
        return Err(Error::Format("policy layer count does not match its sizes".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, layer) in p.layers.into_iter().enumerate() {
        let w = layer.weight.into_matrix("policy weight")?;
        let b = layer.bias.into_matrix("policy bias")?;
        expect_shape("policy weight", &w, p.sizes[l], p.sizes[l + 1])?;
        expect_shape("policy bias", &b, 1, p.sizes[l + 1])?;
        weights.push(w);
        biases.push(b);
    }
    let policy = MlpParams { sizes: p.sizes, weights, biases, activation: p.activation };

    let c = doc.icnn;
    let layers = c.sizes.len().saturating_sub(1);
    if layers == 0
        || c.input_weights.len() != layers
        || c.biases.len() != layers
        || c.recursion_raw.len() != layers - 1
    {
        return Err(Error::Format("convex network layer count does not match its sizes".into()));
    }
    let n = c.sizes[0];
    let to_mats = |docs: Vec<MatrixDoc>, what: &str| -> Result<Vec<Matrix>> {
        docs.into_iter().map(|d| d.into_matrix(what)).collect()
    };
    let input_weights = to_mats(c.input_weights, "input weight")?;
    let recursion_raw = to_mats(c.recursion_raw, "recursion weight")?;
    let icnn_biases = to_mats(c.biases, "convex bias")?;
    for l in 0..layers {
        expect_shape("input weight", &input_weights[l], n, c.sizes[l + 1])?;
        expect_shape("convex bias", &icnn_biases[l], 1, c.sizes[l + 1])?;
        if l > 0 {
            expect_shape("recursion weight", &recursion_raw[l - 1], c.sizes[l], c.sizes[l + 1])?;
        }
    }
    let icnn = IcnnParams {
        sizes: c.sizes,
        input_weights,
        recursion_raw,
        biases: icnn_biases,
        hidden_activation: c.hidden_activation,
        output_activation: c.output_activation,
    };
    let lpf = Potential::new(icnn, doc.target, doc.delta)?;
    let mut model = StablePolicyModel::new(policy, lpf, doc.projection, doc.regularizer, doc.mode)?;
    model.alpha = doc.alpha;
    model.bounds = doc.bounds;
    model.validate()?;
    Ok(model)
}

pub fn model_to_json(model: &StablePolicyModel) -> String {
    let model = to_doc(model);
    let doc = FileDoc {
        format: FORMAT_MAGIC.to_string(),
        format_version: FORMAT_VERSION,
        checksum: checksum(&model),
        model,
    };
    serde_json::to_string_pretty(&doc).expect("model document serializes")
}

pub fn model_from_json(text: &str) -> Result<StablePolicyModel> {
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("truncated or malformed document: {e}")))?;
    if header.format.as_deref() != Some(FORMAT_MAGIC) {
        return Err(Error::Format(format!(
            "not a model file (format {:?}, expected {FORMAT_MAGIC:?})",
            header.format
        )));
    }
    if header.format_version != Some(FORMAT_VERSION) {
        return Err(Error::Format(format!(
            "unsupported format version {:?}, expected {FORMAT_VERSION}",
            header.format_version
        )));
    }
    let doc: FileDoc = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("malformed document: {e}")))?;
    let actual = checksum(&doc.model);
    if actual != doc.checksum {
        return Err(Error::Format(format!(
            "checksum mismatch (stored {}, computed {actual})",
            doc.checksum
        )));
    }
    from_doc(doc.model)
}

pub fn save_model(model: &StablePolicyModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<StablePolicyModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Bounds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> StablePolicyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = MlpParams::init(&[2, 5, 2], Activation::LeakyRelu, &mut rng).unwrap();
        let icnn = IcnnParams::init(&[2, 4, 4, 1], &mut rng).unwrap();
        let lpf = Potential::new(icnn, vec![0.1, -0.3], 2e-4).unwrap();
        let mut m = StablePolicyModel::new(policy, lpf, ProjectionActivation::Relu, 3e-9, PolicyMode::Stable)
            .unwrap();
        m.bounds = Some(Bounds { min: vec![-1.0, -1.0], max: vec![0.5, 0.25] });
        m
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let back = model_from_json(&model_to_json(&m)).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.parameters().iter().zip(m.parameters()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.mode, PolicyMode::Stable);
        assert_eq!(back.regularizer.to_bits(), 3e-9f64.to_bits());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let text = model_to_json(&model()).replacen(FORMAT_MAGIC, "other-model", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Format(m)) if m.contains("not a model file")));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = model_to_json(&model()).replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn tampering_fails_checksum() {
        let text = model_to_json(&model()).replacen("\"alpha\": 0.0", "\"alpha\": 0.5", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Format(m)) if m.contains("checksum")));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = model_to_json(&model());
        assert!(matches!(model_from_json(&text[..text.len() / 2]), Err(Error::Format(_))));
    }
}
