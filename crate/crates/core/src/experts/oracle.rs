use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::rng::{derive_seed, hash_str, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffSpecialty {
    /// One-hot on a uniformly drawn class.
    RandomOneHot,
    /// The uniform distribution over classes.
    Uniform,
}

/// Frozen test double that knows the true label of its specialty class.
///
/// Outputs are a deterministic function of `(seed, mesh id)`, so repeated
/// queries on one mesh agree.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedOracle {
    pub num_classes: usize,
    pub specialty: usize,
    pub accuracy: f64,
    pub off_specialty: OffSpecialty,
    pub seed: u64,
}

impl ScriptedOracle {
    pub fn new(num_classes: usize, specialty: usize, accuracy: f64, off_specialty: OffSpecialty, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!("oracle accuracy {accuracy} outside [0, 1]")));
        }
        if specialty >= num_classes {
            return Err(Error::IndexOutOfRange { index: specialty, len: num_classes });
        }
        Ok(Self { num_classes, specialty, accuracy, off_specialty, seed })
    }

    pub fn predict(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        let truth = mesh
            .class_label
            .ok_or_else(|| Error::invalid(format!("oracle needs the class label of {}", mesh.id)))?;
        let mut rng = SplitMix64::new(derive_seed(self.seed, &[hash_str(&mesh.id)]));
        let mut out = vec![0.0; self.num_classes];
        if truth == self.specialty {
            // 53-bit uniform draw in [0, 1).
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.accuracy {
                out[truth] = 1.0;
                return Ok(out);
            }
        }
        match self.off_specialty {
            OffSpecialty::RandomOneHot => out[rng.below(self.num_classes)] = 1.0,
            OffSpecialty::Uniform => out.iter_mut().for_each(|v| *v = 1.0 / self.num_classes as f64),
        }
        Ok(out)
    }
}
