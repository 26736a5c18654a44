//! Orthogonality penalty between the two branch encodings.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Mean of the squared entries of `H_aware^T H_agnostic` (`2d x 2d`).
pub fn orth_loss(g: &mut Graph<'_>, h_aware: Var, h_agnostic: Var) -> Result<Var> {
    let (a, b) = (g.value(h_aware), g.value(h_agnostic));
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "orth_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let at = g.transpose(h_aware)?;
    let gram = g.matmul(at, h_agnostic)?;
    let sq = g.mul(gram, gram)?;
    g.mean(sq)
}
