use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of a GRU(layers, L)-MLP classifier.
///
/// The MLP hidden width is not free: it is always `floor((L + C) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr", into = "ArchitectureRepr")]
pub struct Architecture {
    num_gru_layers: usize,
    hidden_size: usize,
    num_classes: usize,
    sequence_length: usize,
    input_dim: usize,
}

impl Architecture {
    pub fn new(
        num_gru_layers: usize,
        hidden_size: usize,
        num_classes: usize,
        sequence_length: usize,
        input_dim: usize,
    ) -> Result<Self> {
        if !(1..=2).contains(&num_gru_layers) {
            return Err(Error::invalid(format!("GRU layer count must be 1 or 2, got {num_gru_layers}")));
        }
        for (name, v) in [
            ("hidden size", hidden_size),
            ("class count", num_classes),
            ("sequence length", sequence_length),
            ("input dimension", input_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if hidden_size > u16::MAX as usize || num_classes > u16::MAX as usize || input_dim > u8::MAX as usize {
            return Err(Error::invalid("architecture dimensions exceed the supported range"));
        }
        Ok(Self { num_gru_layers, hidden_size, num_classes, sequence_length, input_dim })
    }

    pub fn num_gru_layers(&self) -> usize {
        self.num_gru_layers
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sequence_length(&self) -> usize {
        self.sequence_length
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_size + self.num_classes) / 2
    }

    /// Input width of GRU layer `layer` (the sensor dimension for the first
    /// layer, the hidden size above it).
    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_size
        }
    }

    pub fn with_sequence_length(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("sequence length must be at least 1"));
        }
        self.sequence_length = n;
        Ok(self)
    }

    pub fn spec(&self) -> ArchSpec {
        ArchSpec { num_gru_layers: self.num_gru_layers, hidden_size: self.hidden_size }
    }

    /// Number of learnable and frozen scalars, including the two
    /// normalization vectors.
    pub fn count_params(&self) -> usize {
        let l = self.hidden_size;
        let gru: usize = (0..self.num_gru_layers)
            .map(|i| 3 * (l * self.layer_input_dim(i) + l * l + 2 * l))
            .sum();
        let m = self.mlp_hidden();
        let c = self.num_classes;
        gru + (m * l + m + c * m + c) + 2 * self.input_dim
    }

    /// Number of weight-matrix entries (everything that gets quantized).
    pub fn count_weights(&self) -> usize {
        let l = self.hidden_size;
        let gru: usize = (0..self.num_gru_layers).map(|i| 3 * (l * self.layer_input_dim(i) + l * l)).sum();
        gru + self.mlp_hidden() * l + self.num_classes * self.mlp_hidden()
    }

    /// Multiplications for one inference: every MVM product plus the
    /// element-wise products (normalization, `r*hn`, `(1-z)*n`, `z*h`).
    /// Activation internals are not counted.
    pub fn count_mults(&self) -> u64 {
        self.count_mults_for_length(self.sequence_length)
    }

    /// [`count_mults`](Self::count_mults) for an arbitrary window length;
    /// `n = 0` leaves only the MLP head.
    pub fn count_mults_for_length(&self, n: usize) -> u64 {
        let l = self.hidden_size as u64;
        let per_step: u64 = self.input_dim as u64
            + (0..self.num_gru_layers)
                .map(|i| 3 * (l * self.layer_input_dim(i) as u64 + l * l) + 3 * l)
                .sum::<u64>();
        let m = self.mlp_hidden() as u64;
        n as u64 * per_step + m * l + self.num_classes as u64 * m
    }
}

/// The `gru(layers, L)` part of an architecture, as written on the command
/// line; class count, sequence length and input width come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub num_gru_layers: usize,
    pub hidden_size: usize,
}

impl ArchSpec {
    pub fn new(num_gru_layers: usize, hidden_size: usize) -> Self {
        Self { num_gru_layers, hidden_size }
    }

    pub fn build(&self, num_classes: usize, sequence_length: usize, input_dim: usize) -> Result<Architecture> {
        Architecture::new(self.num_gru_layers, self.hidden_size, num_classes, sequence_length, input_dim)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gru({},{})", self.num_gru_layers, self.hidden_size)
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    /// Accepts `gru(l,h)` with an optional `-mlp` suffix, case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse architecture {s:?}; expected gru(layers,hidden)"));
        let lower = s.trim().to_ascii_lowercase();
        let body = lower.strip_suffix("-mlp").unwrap_or(&lower);
        let inner = body
            .strip_prefix("gru(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (layers, hidden) = inner.split_once(',').ok_or_else(bad)?;
        let layers: usize = layers.trim().parse().map_err(|_| bad())?;
        let hidden: usize = hidden.trim().parse().map_err(|_| bad())?;
        if !(1..=2).contains(&layers) || hidden == 0 {
            return Err(bad());
        }
        Ok(Self { num_gru_layers: layers, hidden_size: hidden })
    }
}

#[derive(Serialize, Deserialize)]
struct ArchitectureRepr {
    num_gru_layers: usize,
    hidden_size: usize,
    num_classes: usize,
    sequence_length: usize,
    input_dim: usize,
    mlp_hidden: usize,
}

impl From<Architecture> for ArchitectureRepr {
    fn from(a: Architecture) -> Self {
        Self {
            num_gru_layers: a.num_gru_layers,
            hidden_size: a.hidden_size,
            num_classes: a.num_classes,
            sequence_length: a.sequence_length,
            input_dim: a.input_dim,
            mlp_hidden: a.mlp_hidden(),
        }
    }
}

impl TryFrom<ArchitectureRepr> for Architecture {
    type Error = Error;

    fn try_from(r: ArchitectureRepr) -> Result<Self> {
        let a = Architecture::new(r.num_gru_layers, r.hidden_size, r.num_classes, r.sequence_length, r.input_dim)?;
        if a.mlp_hidden() != r.mlp_hidden {
            return Err(Error::invalid(format!(
                "mlp_hidden {} inconsistent with floor((L+C)/2) = {}",
                r.mlp_hidden,
                a.mlp_hidden()
            )));
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_arch_strings() {
        assert_eq!("gru(1,32)".parse::<ArchSpec>().unwrap(), ArchSpec::new(1, 32));
        assert_eq!("GRU(2, 32)-MLP".parse::<ArchSpec>().unwrap(), ArchSpec::new(2, 32));
        assert_eq!("gru(1,64)".parse::<ArchSpec>().unwrap().to_string(), "gru(1,64)");
        for bad in ["gru(3,32)", "gru(1,0)", "lstm(1,32)", "gru(1 32)", "gru(1,32", ""] {
            assert!(bad.parse::<ArchSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn param_counts() {
        let a = Architecture::new(1, 32, 3, 256, 3).unwrap();
        assert_eq!(a.mlp_hidden(), 17);
        assert_eq!(a.count_params(), 3552 + 615 + 6);
        assert_eq!(Architecture::new(1, 1, 1, 1, 1).unwrap().count_params(), 18);

        let recurrent = |l: usize| {
            let a = Architecture::new(1, l, 3, 256, 3).unwrap();
            a.count_params() - (a.mlp_hidden() * l + a.mlp_hidden() + 3 * a.mlp_hidden() + 3) - 6
        };
        assert!(recurrent(64) > 3 * recurrent(32));
    }

    #[test]
    fn mult_counts() {
        let a = Architecture::new(1, 64, 3, 256, 3).unwrap();
        let core = 256 * 3 * (192 + 4096);
        let m = a.count_mults();
        assert_eq!(m, core + 256 * (3 + 3 * 64) + 33 * 64 + 3 * 33);
        assert!((m as f64 - 3.30e6).abs() / 3.30e6 < 0.02);

        let a = Architecture::new(2, 8, 3, 1, 3).unwrap();
        let mlp_only = (a.mlp_hidden() * 8 + 3 * a.mlp_hidden()) as u64;
        assert_eq!(a.count_mults_for_length(0), mlp_only);
        let c = |n: usize| a.with_sequence_length(n).unwrap().count_mults();
        assert_eq!(c(1) - mlp_only, c(2) - c(1));
        assert_eq!(c(40) - c(20), c(20) - a.count_mults_for_length(0));
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(0, 8, 3, 4, 3).is_err());
        assert!(Architecture::new(3, 8, 3, 4, 3).is_err());
        assert!(Architecture::new(1, 0, 3, 4, 3).is_err());
        let a = Architecture::new(2, 8, 3, 4, 3).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"mlp_hidden\":5"));
        assert_eq!(serde_json::from_str::<Architecture>(&json).unwrap(), a);
        let tampered = json.replace("\"mlp_hidden\":5", "\"mlp_hidden\":6");
        assert!(serde_json::from_str::<Architecture>(&tampered).is_err());
    }
}
