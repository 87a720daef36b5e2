use serde::{Deserialize, Serialize};

use super::RiskError;

/// `n` rows of `[state; action]`, oldest first. Missing history is zero
/// padding at the front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateActionSequence {
    pub rows: Vec<f64>,
    pub seq_len: usize,
    pub row_dim: usize,
    pub valid_length: usize,
    /// 1 for collision, 0 for arrival, `None` while unlabeled.
    pub label: Option<u8>,
}

impl StateActionSequence {
    /// Front-pads `pairs` (oldest first) to `seq_len` rows. Only the most
    /// recent `seq_len` pairs are kept.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a [f64], f64)>,
        seq_len: usize,
        state_dim: usize,
    ) -> Result<Self, RiskError> {
        let row_dim = state_dim + 1;
        let mut body: Vec<Vec<f64>> = Vec::new();
        for (s, a) in pairs {
            if s.len() != state_dim {
                return Err(RiskError::Shape(format!("state length {} != {state_dim}", s.len())));
            }
            let mut r = s.to_vec();
            r.push(a);
            body.push(r);
        }
        if body.len() > seq_len {
            body.drain(..body.len() - seq_len);
        }
        let valid_length = body.len();
        let mut rows = vec![0.0; (seq_len - valid_length) * row_dim];
        for r in body {
            rows.extend(r);
        }
        Ok(Self { rows, seq_len, row_dim, valid_length, label: None })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.row_dim..(i + 1) * self.row_dim]
    }

    pub fn padding(&self) -> usize {
        self.seq_len - self.valid_length
    }

    pub fn last_action(&self) -> f64 {
        self.rows[self.rows.len() - 1]
    }

    /// Copy with the action of the newest row replaced.
    pub fn with_last_action(&self, action: f64) -> Self {
        let mut out = self.clone();
        let k = out.rows.len() - 1;
        out.rows[k] = action;
        out
    }

    pub fn validate(&self, seq_len: usize, row_dim: usize) -> Result<(), RiskError> {
        if self.seq_len != seq_len || self.row_dim != row_dim || self.rows.len() != seq_len * row_dim {
            return Err(RiskError::Shape(format!(
                "expected {seq_len}x{row_dim}, got {}x{} ({} values)",
                self.seq_len,
                self.row_dim,
                self.rows.len()
            )));
        }
        if self.valid_length > seq_len {
            return Err(RiskError::Shape("valid_length exceeds sequence length".into()));
        }
        if self.rows.iter().any(|x| !x.is_finite()) {
            return Err(RiskError::NonFinite);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn front_padding() {
        let s = [vec![1.0, 2.0], vec![3.0, 4.0]];
        let seq = StateActionSequence::from_pairs(s.iter().map(|x| (x.as_slice(), 0.5)), 4, 2).unwrap();
        assert_eq!(seq.valid_length, 2);
        assert_eq!(seq.padding(), 2);
        assert_eq!(seq.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(seq.row(2), &[1.0, 2.0, 0.5]);
        assert_eq!(seq.row(3), &[3.0, 4.0, 0.5]);
        assert_eq!(seq.last_action(), 0.5);
        assert_eq!(seq.with_last_action(-1.0).row(3), &[3.0, 4.0, -1.0]);
    }

    #[test]
    fn keeps_most_recent_rows() {
        let s: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let seq = StateActionSequence::from_pairs(s.iter().map(|x| (x.as_slice(), 0.0)), 3, 1).unwrap();
        assert_eq!(seq.valid_length, 3);
        assert_eq!(seq.row(0)[0], 3.0);
    }
}
