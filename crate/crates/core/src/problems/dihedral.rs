use egam_tensor::Real;

use super::Instance;

/// Size of the symmetry group of the unit square.
pub const DIHEDRAL_ORDER: usize = 8;

/// The `k`-th symmetry of the unit square about its centre: `k % 4` quarter
/// turns, preceded by a reflection in the diagonal when `k >= 4`.
pub fn dihedral_point(k: usize, p: [Real; 2]) -> [Real; 2] {
    let [mut x, mut y] = p;
    if k % DIHEDRAL_ORDER >= 4 {
        std::mem::swap(&mut x, &mut y);
    }
    for _ in 0..k % 4 {
        (x, y) = (1.0 - y, x);
    }
    [x, y]
}

/// Applies [`dihedral_point`] to every coordinate; other attributes are kept.
pub fn dihedral_transform(inst: &Instance, k: usize) -> Instance {
    let mut out = inst.clone();
    for c in &mut out.coords {
        *c = dihedral_point(k, *c);
    }
    out
}
