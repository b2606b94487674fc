use super::forward::{feature_rows, forward_sample, project_features};
use super::model::DecoderModel;
use super::ops::Matrix;
use super::{DecoderError, BOS_ID, EOS_ID};
use crate::features::FeatureMatrix;

/// Greedy argmax decoding from BOS over projected `memory`.
///
/// Stops at EOS (not included in the result) or after `max_len` tokens.
/// Ties go to the smallest id.
pub fn greedy_decode(
    model: &DecoderModel,
    memory: &Matrix,
    mem_pad: &[bool],
    bos_id: u32,
    eos_id: u32,
) -> Result<Vec<u32>, DecoderError> {
    let max_len = model.config.max_len;
    let mut input = vec![bos_id];
    let mut out = Vec::new();
    while out.len() < max_len {
        let (logits, _) = forward_sample(model, &input, memory, mem_pad, None)?;
        let last = logits.row(logits.rows - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let next = best as u32;
        if next == eos_id {
            break;
        }
        out.push(next);
        input.push(next);
    }
    Ok(out)
}

/// Projects a stored feature matrix and decodes it greedily.
pub fn generate_from_features(model: &DecoderModel, features: &FeatureMatrix) -> Result<Vec<u32>, DecoderError> {
    if features.n() == 0 {
        return Err(DecoderError::EmptyMemory);
    }
    let memory = project_features(&feature_rows(features), &model.proj)?;
    let pad = vec![false; memory.rows];
    greedy_decode(model, &memory, &pad, BOS_ID, EOS_ID)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;

    #[test]
    fn output_is_bounded_and_deterministic() {
        let cfg = DecoderConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, dropout: 0.0, max_len: 5, vocab: 12, feat_dim: 4 };
        let model = DecoderModel::xavier_init(&cfg, 2).unwrap();
        let memory = Matrix::from_fn(3, 8, |i, j| (i as f64 - j as f64) * 0.3);
        let pad = [false, false, true];
        let a = greedy_decode(&model, &memory, &pad, BOS_ID, EOS_ID).unwrap();
        let b = greedy_decode(&model, &memory, &pad, BOS_ID, EOS_ID).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= cfg.max_len);
        assert!(!a.contains(&EOS_ID));
    }

    #[test]
    fn eos_bias_stops_immediately() {
        let cfg = DecoderConfig { layers: 1, heads: 1, d_model: 4, d_ff: 4, dropout: 0.0, max_len: 4, vocab: 6, feat_dim: 2 };
        let mut model = DecoderModel::zeros(&cfg);
        model.head.b[EOS_ID as usize] = 1.0;
        let memory = Matrix::zeros(1, 4);
        assert!(greedy_decode(&model, &memory, &[false], BOS_ID, EOS_ID).unwrap().is_empty());
    }

    #[test]
    fn ties_pick_smallest_id() {
        let cfg = DecoderConfig { layers: 1, heads: 1, d_model: 4, d_ff: 4, dropout: 0.0, max_len: 3, vocab: 6, feat_dim: 2 };
        let model = DecoderModel::zeros(&cfg);
        let memory = Matrix::zeros(1, 4);
        // All-zero head: every logit ties, so PAD (id 0) wins each step.
        assert_eq!(greedy_decode(&model, &memory, &[false], BOS_ID, EOS_ID).unwrap(), vec![0, 0, 0]);
    }
}
