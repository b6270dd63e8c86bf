//! Portable text checkpoints.
//!
//! ```text
//! MLP 3 32 32 2
//! 42
//! <layer 0 matrix, row-major> <layer 0 biases>
//! <layer 1 matrix, row-major> <layer 1 biases>
//! ...
//! ```
//!
//! One line per layer. Weights use Rust's shortest round-trip float format, so
//! a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::mlp::{weight_count, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mlp: Mlp,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(mlp: Mlp, seed: u64) -> Self {
        Self { mlp, seed }
    }

    pub fn to_text(&self) -> String {
        let dims = self.mlp.dims();
        let mut out = String::from("MLP");
        for d in dims {
            write!(out, " {d}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "{}", self.seed).unwrap();
        let mut off = 0;
        for w in dims.windows(2) {
            let n = (w[0] + 1) * w[1];
            let line: Vec<String> = self.mlp.weights()[off..off + n].iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
            off += n;
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Checkpoint("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("MLP") {
            return Err(Error::Checkpoint(format!("expected header 'MLP <dims>', got '{header}'")));
        }
        let dims = fields
            .map(|f| f.parse::<usize>().map_err(|e| Error::Checkpoint(format!("bad layer dim '{f}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Checkpoint(format!("invalid layer dims {dims:?}")));
        }
        let seed_line = lines.next().ok_or_else(|| Error::Checkpoint("missing seed line".into()))?;
        let seed =
            seed_line.trim().parse::<u64>().map_err(|e| Error::Checkpoint(format!("bad seed '{seed_line}': {e}")))?;
        let mut weights = Vec::with_capacity(weight_count(&dims));
        for (i, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let w = tok
                    .parse::<f64>()
                    .map_err(|e| Error::Checkpoint(format!("line {}: bad weight '{tok}': {e}", i + 3)))?;
                if !w.is_finite() {
                    return Err(Error::Checkpoint(format!("line {}: non-finite weight", i + 3)));
                }
                weights.push(w);
            }
        }
        let expected = weight_count(&dims);
        if weights.len() != expected {
            return Err(Error::Checkpoint(format!(
                "dims {dims:?} need {expected} weights, file has {}",
                weights.len()
            )));
        }
        Ok(Self { mlp: Mlp::new(dims, weights)?, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mlp = Mlp::init(vec![3, 7, 5, 2], &mut rng::stream(9, "init", &[])).unwrap();
        let ckpt = Checkpoint::new(mlp, 9);
        let text = ckpt.to_text();
        assert!(text.starts_with("MLP 3 7 5 2\n9\n"));
        assert_eq!(text.lines().count(), 2 + 3);
        assert_eq!(Checkpoint::parse(&text).unwrap(), ckpt);
    }

    #[test]
    fn rejects_weight_count_mismatch() {
        let text = "MLP 2 1\n0\n0.5 0.25\n";
        let err = Checkpoint::parse(text).unwrap_err();
        assert!(err.to_string().contains("need 3 weights"), "{err}");
        assert!(Checkpoint::parse("MLP 2 1\n0\n1 2 3 4\n").is_err());
        assert!(Checkpoint::parse("MLP 2 1\n0\n1 2 3\n").is_ok());
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(Checkpoint::parse("").is_err());
        assert!(Checkpoint::parse("NET 2 1\n0\n1 2 3\n").is_err());
        assert!(Checkpoint::parse("MLP 2\n0\n").is_err());
        assert!(Checkpoint::parse("MLP 2 1\nseed\n1 2 3\n").is_err());
        assert!(Checkpoint::parse("MLP 2 1\n0\n1 x 3\n").is_err());
    }
}
