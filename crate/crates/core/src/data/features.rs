use face_diffcore::Tensor;

use crate::error::{FaceError, Result};

/// One subject's differential-entropy features, `N × C × B`, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub subject: String,
    pub num_classes: usize,
    features: Tensor<f32>,
    labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(
        subject: impl Into<String>,
        num_classes: usize,
        features: Tensor<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let subject = subject.into();
        let shape = features.shape();
        if shape.len() != 3 {
            return Err(FaceError::Load(format!(
                "subject `{subject}`: features must be N×C×B, got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(FaceError::Load(format!(
                "subject `{subject}`: {} samples but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(FaceError::Load(format!(
                "subject `{subject}`: label {l} at sample {i} is outside 0..{num_classes}"
            )));
        }
        if let Some(offset) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(FaceError::NonFinite { subject, offset });
        }
        Ok(Self {
            subject,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `C × B` features of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.channels() * self.bands();
        &self.features.data()[i * stride..(i + 1) * stride]
    }

    /// Sample indices of each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Gathers samples into an `n × C × B` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(FaceError::Precondition(format!("empty batch from subject `{}`", self.subject)));
        }
        let (c, b) = (self.channels(), self.bands());
        let mut data = Vec::with_capacity(indices.len() * c * b);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), c, b], data)?, labels))
    }
}
