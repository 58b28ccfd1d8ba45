//! Attack features: what a membership probe sees about one sample.
//!
//! Block order inside a feature vector is fixed: posterior probabilities,
//! predicted one-hot label, per-sample loss, gradient block. Black-box access
//! stops before the gradient block. The differentiability mask records which
//! blocks the unlearning objective may push gradients through: posterior and
//! loss flow; the one-hot label and gradient norms are recomputed from the
//! current weights but treated as constants.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_grad, per_sample_cross_entropy};
use crate::net::{argmax_rows, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    BlackBox,
    WhiteBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradReduction {
    /// L2 norm of each parameterized layer's gradient; one value per layer.
    PerLayerNorms,
    /// The last parameterized layer's full gradient.
    LastLayerFull,
}

/// Which feature blocks may carry gradient back into the probed network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub posterior: bool,
    pub pred_label: bool,
    pub loss: bool,
    pub gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub access: AccessMode,
    pub include_posterior: bool,
    pub include_pred_label: bool,
    pub include_loss: bool,
    pub include_gradient: bool,
    pub gradient_reduction: GradReduction,
    pub differentiable: BlockMask,
}

impl FeatureSpec {
    pub fn white_box() -> FeatureSpec {
        FeatureSpec {
            access: AccessMode::WhiteBox,
            include_posterior: true,
            include_pred_label: true,
            include_loss: true,
            include_gradient: true,
            gradient_reduction: GradReduction::PerLayerNorms,
            differentiable: BlockMask { posterior: true, pred_label: false, loss: true, gradient: false },
        }
    }

    pub fn black_box() -> FeatureSpec {
        FeatureSpec {
            include_gradient: false,
            access: AccessMode::BlackBox,
            ..FeatureSpec::white_box()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.include_gradient && self.access == AccessMode::BlackBox {
            return Err(Error::Access("gradient features require white-box access".into()));
        }
        if !(self.include_posterior || self.include_pred_label || self.include_loss || self.include_gradient) {
            return Err(Error::Input("feature spec selects no blocks".into()));
        }
        if self.differentiable.pred_label {
            return Err(Error::Config("predicted label is piecewise constant; cannot mark differentiable".into()));
        }
        if self.differentiable.gradient {
            return Err(Error::Config("gradient block is stop-gradient by construction".into()));
        }
        Ok(())
    }

    /// Width of the gradient block for the probed network.
    pub fn gradient_dims(&self, net: &Network) -> usize {
        if !self.include_gradient {
            return 0;
        }
        let spans = net.param_spans();
        match self.gradient_reduction {
            GradReduction::PerLayerNorms => spans.len(),
            GradReduction::LastLayerFull => spans.last().map_or(0, |s| s.len),
        }
    }

    pub fn feature_len(&self, k: usize, grad_dims: usize) -> usize {
        self.layout(k, grad_dims).len
    }

    pub fn layout(&self, k: usize, grad_dims: usize) -> FeatureLayout {
        let mut at = 0;
        let mut block = |on: bool, width: usize| -> Option<Range<usize>> {
            if on && width > 0 {
                let r = at..at + width;
                at += width;
                Some(r)
            } else {
                None
            }
        };
        let posterior = block(self.include_posterior, k);
        let pred_label = block(self.include_pred_label, k);
        let loss = block(self.include_loss, 1).map(|r| r.start);
        let gradient = block(self.include_gradient, grad_dims);
        FeatureLayout { posterior, pred_label, loss, gradient, len: at }
    }
}

/// Block offsets inside a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub posterior: Option<Range<usize>>,
    pub pred_label: Option<Range<usize>>,
    pub loss: Option<usize>,
    pub gradient: Option<Range<usize>>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackFeatureRecord {
    pub features: Vec<f64>,
    /// Some(true) = was in the probed model's training set.
    pub membership: Option<bool>,
    pub source_index: usize,
}

/// Features of one corpus sample as seen through `net`. Never mutates `net`.
pub fn extract(
    net: &Network,
    corpus: &Corpus,
    index: usize,
    spec: &FeatureSpec,
) -> Result<AttackFeatureRecord> {
    spec.validate()?;
    let (batch, labels) = corpus.batch(&[index])?;
    let (probs, trace) = net.forward_traced(&batch)?;
    let layout = spec.layout(net.class_count(), spec.gradient_dims(net));
    let mut features = vec![0.0; layout.len];

    if let Some(r) = &layout.posterior {
        features[r.clone()].copy_from_slice(probs.row(0));
    }
    if let Some(r) = &layout.pred_label {
        let pred = argmax_rows(&probs)[0];
        features[r.start + pred] = 1.0;
    }
    if let Some(at) = layout.loss {
        features[at] = per_sample_cross_entropy(&probs, &labels)?[0];
    }
    if let Some(r) = &layout.gradient {
        let d_probs = cross_entropy_grad(&probs, &labels)?;
        let (flat, _) = net.backward_from(&trace, &d_probs)?;
        let block = gradient_block(net, spec, &flat);
        features[r.clone()].copy_from_slice(&block);
    }
    Ok(AttackFeatureRecord { features, membership: None, source_index: index })
}

pub fn gradient_block(net: &Network, spec: &FeatureSpec, flat_grad: &[f64]) -> Vec<f64> {
    let spans = net.param_spans();
    match spec.gradient_reduction {
        GradReduction::PerLayerNorms => spans
            .iter()
            .map(|s| {
                flat_grad[s.offset..s.offset + s.len]
                    .iter()
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
        GradReduction::LastLayerFull => spans
            .last()
            .map(|s| flat_grad[s.offset..s.offset + s.len].to_vec())
            .unwrap_or_default(),
    }
}

/// Extracts features for many samples; output order matches input order.
pub fn extract_all(
    net: &Network,
    corpus: &Corpus,
    indices: &[usize],
    spec: &FeatureSpec,
) -> Result<Vec<AttackFeatureRecord>> {
    spec.validate()?;
    indices
        .par_iter()
        .map(|&i| extract(net, corpus, i, spec))
        .collect()
}

/// Membership-labeled dataset: member rows first (z=1), then nonmembers
/// (z=0), balanced by deterministically striding down the larger side.
pub fn build_attack_dataset(
    net: &Network,
    corpus: &Corpus,
    members: &[usize],
    nonmembers: &[usize],
    spec: &FeatureSpec,
) -> Result<Vec<AttackFeatureRecord>> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Input("attack dataset needs both members and nonmembers".into()));
    }
    let n = members.len().min(nonmembers.len());
    let members = stride_subsample(members, n);
    let nonmembers = stride_subsample(nonmembers, n);
    let mut records = extract_all(net, corpus, &members, spec)?;
    for r in records.iter_mut() {
        r.membership = Some(true);
    }
    let mut out_records = extract_all(net, corpus, &nonmembers, spec)?;
    for r in out_records.iter_mut() {
        r.membership = Some(false);
    }
    records.extend(out_records);
    Ok(records)
}

/// Keeps n of the given indices at evenly spaced positions.
pub fn stride_subsample(indices: &[usize], n: usize) -> Vec<usize> {
    if indices.len() == n {
        return indices.to_vec();
    }
    (0..n).map(|i| indices[i * indices.len() / n]).collect()
}

/// CSV layout: `# spec: {json}` comment, then header f0..fn,z,source_index.
pub fn save_attack_csv(records: &[AttackFeatureRecord], spec: &FeatureSpec, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("no records to save".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let spec_json = serde_json::to_string(spec)
        .map_err(|e| Error::Format(format!("feature spec to json: {e}")))?;
    let width = records[0].features.len();
    let mut out = format!("# spec: {spec_json}\n");
    for i in 0..width {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("z,source_index\n");
    for r in records {
        if r.features.len() != width {
            return Err(Error::Input("records have inconsistent feature widths".into()));
        }
        let z = match r.membership {
            Some(true) => 1,
            Some(false) => 0,
            None => return Err(Error::Input("unlabeled record cannot be saved".into())),
        };
        for f in &r.features {
            out.push_str(&format!("{f},"));
        }
        out.push_str(&format!("{z},{}\n", r.source_index));
    }
    std::fs::write(path, out).map_err(Error::at(path))?;
    Ok(())
}

pub fn load_attack_csv(path: &Path) -> Result<(Vec<AttackFeatureRecord>, FeatureSpec)> {
    let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
    let mut lines = text.lines();
    let spec_line = lines.next().ok_or_else(|| Error::Format("empty attack csv".into()))?;
    let spec_json = spec_line
        .strip_prefix("# spec: ")
        .ok_or_else(|| Error::Format("attack csv lacks '# spec:' comment line".into()))?;
    let spec: FeatureSpec = serde_json::from_str(spec_json)
        .map_err(|e| Error::Format(format!("attack csv spec json: {e}")))?;
    let header = lines.next().ok_or_else(|| Error::Format("attack csv lacks header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "z" || cols[cols.len() - 1] != "source_index" {
        return Err(Error::Format(format!("unexpected attack csv header '{header}'")));
    }
    let width = cols.len() - 2;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!("attack csv row {i} has {} fields", fields.len())));
        }
        let mut features = Vec::with_capacity(width);
        for f in &fields[..width] {
            features.push(
                f.parse()
                    .map_err(|_| Error::Format(format!("attack csv row {i}: bad number '{f}'")))?,
            );
        }
        let membership = match fields[width] {
            "1" => Some(true),
            "0" => Some(false),
            other => return Err(Error::Format(format!("attack csv row {i}: bad z '{other}'"))),
        };
        let source_index = fields[width + 1]
            .parse()
            .map_err(|_| Error::Format(format!("attack csv row {i}: bad source index")))?;
        records.push(AttackFeatureRecord { features, membership, source_index });
    }
    Ok((records, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::net::arch;
    use crate::numcheck::{compare_gradients, fd_gradient};

    fn corpus() -> Corpus {
        make_synthetic(&SyntheticSpec {
            classes: 4,
            per_class: 10,
            dim: 6,
            sigma: 1.0,
            center_distance: 3.0,
            label_noise: 0.0,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn feature_length_adds_up_blocks() {
        // k=4 posterior + k=4 one-hot + 1 loss + 3 per-layer norms = 12
        let net = arch::mlp(1, 6, &[8, 8], 4).unwrap();
        let spec = FeatureSpec::white_box();
        assert_eq!(net.param_spans().len(), 3);
        assert_eq!(spec.feature_len(4, spec.gradient_dims(&net)), 12);

        let bb = FeatureSpec::black_box();
        assert_eq!(bb.feature_len(4, bb.gradient_dims(&net)), 9);
    }

    #[test]
    fn gradient_in_black_box_mode_is_access_error() {
        let spec = FeatureSpec { include_gradient: true, ..FeatureSpec::black_box() };
        assert!(matches!(spec.validate(), Err(Error::Access(_))));
    }

    #[test]
    fn non_differentiable_blocks_cannot_be_unmasked() {
        let mut spec = FeatureSpec::white_box();
        spec.differentiable.gradient = true;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = FeatureSpec::white_box();
        spec.differentiable.pred_label = true;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn extracted_blocks_match_direct_computation() {
        let corpus = corpus();
        let net = arch::mlp(2, 6, &[8, 8], 4).unwrap();
        let spec = FeatureSpec::white_box();
        let rec = extract(&net, &corpus, 5, &spec).unwrap();
        assert_eq!(rec.features.len(), 12);
        assert_eq!(rec.source_index, 5);
        assert_eq!(rec.membership, None);

        let (batch, labels) = corpus.batch(&[5]).unwrap();
        let probs = net.forward(&batch).unwrap();
        assert_eq!(&rec.features[0..4], probs.row(0));
        let pred = argmax_rows(&probs)[0];
        let mut onehot = [0.0; 4];
        onehot[pred] = 1.0;
        assert_eq!(&rec.features[4..8], &onehot);
        let loss = per_sample_cross_entropy(&probs, &labels).unwrap()[0];
        assert_eq!(rec.features[8], loss);
        assert!(rec.features[9..12].iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gradient_norm_features_match_per_layer_slices() {
        let corpus = corpus();
        let net = arch::mlp(3, 6, &[8, 8], 4).unwrap();
        let spec = FeatureSpec::white_box();
        for &idx in &[0, 7, 23] {
            let rec = extract(&net, &corpus, idx, &spec).unwrap();
            let (batch, labels) = corpus.batch(&[idx]).unwrap();
            let (probs, trace) = net.forward_traced(&batch).unwrap();
            let d = cross_entropy_grad(&probs, &labels).unwrap();
            let (flat, _) = net.backward_from(&trace, &d).unwrap();
            for (j, span) in net.param_spans().iter().enumerate() {
                let norm = flat[span.offset..span.offset + span.len]
                    .iter()
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                assert!((rec.features[9 + j] - norm).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn gradient_norm_features_agree_with_finite_differences() {
        let corpus = corpus();
        let net = arch::mlp(4, 6, &[5], 4).unwrap();
        let spec = FeatureSpec::white_box();
        let rec = extract(&net, &corpus, 11, &spec).unwrap();
        let (batch, labels) = corpus.batch(&[11]).unwrap();
        let numeric = fd_gradient(&net, 1e-5, |n| {
            let probs = n.forward(&batch)?;
            Ok(per_sample_cross_entropy(&probs, &labels)?[0])
        })
        .unwrap();
        for (j, span) in net.param_spans().iter().enumerate() {
            let fd_norm = numeric[span.offset..span.offset + span.len]
                .iter()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let got = rec.features[9 + j];
            let check = compare_gradients(&[got], &[fd_norm], 1e-8);
            assert!(check.max_rel_err <= 1e-4, "layer {j}: {got} vs fd {fd_norm}");
        }
    }

    #[test]
    fn extraction_never_mutates_the_probed_network() {
        let corpus = corpus();
        let net = arch::mlp(5, 6, &[8], 4).unwrap();
        let before = net.param_vector();
        let _ = extract_all(&net, &corpus, &[0, 1, 2, 3], &FeatureSpec::white_box()).unwrap();
        assert_eq!(net.param_vector(), before);
    }

    #[test]
    fn attack_dataset_balances_and_labels() {
        let corpus = corpus();
        let net = arch::mlp(6, 6, &[8], 4).unwrap();
        let members: Vec<usize> = (0..10).collect();
        let nonmembers: Vec<usize> = (10..40).collect();
        let records =
            build_attack_dataset(&net, &corpus, &members, &nonmembers, &FeatureSpec::black_box())
                .unwrap();
        assert_eq!(records.len(), 20);
        let member_count = records.iter().filter(|r| r.membership == Some(true)).count();
        assert_eq!(member_count, 10);
        // Member block preserves input order.
        let sources: Vec<usize> = records[..10].iter().map(|r| r.source_index).collect();
        assert_eq!(sources, members);
    }

    #[test]
    fn stride_subsample_spreads_evenly() {
        let idx: Vec<usize> = (0..30).collect();
        let picked = stride_subsample(&idx, 10);
        assert_eq!(picked, vec![0, 3, 6, 9, 12, 15, 18, 21, 24, 27]);
    }

    #[test]
    fn attack_csv_roundtrip_preserves_records_and_spec() {
        let corpus = corpus();
        let net = arch::mlp(7, 6, &[8], 4).unwrap();
        let spec = FeatureSpec::white_box();
        let records =
            build_attack_dataset(&net, &corpus, &[0, 1, 2], &[20, 21, 22], &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attack.csv");
        save_attack_csv(&records, &spec, &path).unwrap();
        let (loaded, loaded_spec) = load_attack_csv(&path).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(loaded.len(), records.len());
        for (a, b) in loaded.iter().zip(&records) {
            assert_eq!(a.membership, b.membership);
            assert_eq!(a.source_index, b.source_index);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x, y, "csv float roundtrip must be exact");
            }
        }
    }

    #[test]
    fn last_layer_full_reduction_has_param_width() {
        let net = arch::mlp(8, 6, &[5], 3).unwrap();
        let spec = FeatureSpec {
            gradient_reduction: GradReduction::LastLayerFull,
            ..FeatureSpec::white_box()
        };
        // Last dense layer: 5 * 3 weights + 3 biases.
        assert_eq!(spec.gradient_dims(&net), 18);
        let corpus = corpus();
        let rec = extract(&net, &corpus, 0, &spec).unwrap();
        assert_eq!(rec.features.len(), 3 + 3 + 1 + 18);
    }

    #[test]
    fn black_box_and_white_box_share_leading_blocks() {
        let corpus = corpus();
        let net = arch::mlp(9, 6, &[8], 4).unwrap();
        let wb = extract(&net, &corpus, 3, &FeatureSpec::white_box()).unwrap();
        let bb = extract(&net, &corpus, 3, &FeatureSpec::black_box()).unwrap();
        assert_eq!(&wb.features[..9], &bb.features[..]);
    }
}
