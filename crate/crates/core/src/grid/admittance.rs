use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{GridCase, GridError, Line, MIN_IMPEDANCE_SQ};

/// Series admittance `1 / (r + i x)` of a line.
pub fn series_admittance(r: f64, x: f64) -> Result<Complex64, GridError> {
    let den = r * r + x * x;
    if !(den >= MIN_IMPEDANCE_SQ) {
        return Err(GridError::DegenerateImpedance(den));
    }
    Ok(Complex64::new(r / den, -x / den))
}

pub fn line_admittance(line: &Line) -> Result<Complex64, GridError> {
    series_admittance(line.r, line.x)
}

/// Dense complex bus-admittance matrix `Y = G + iB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmittanceMatrix(DMatrix<Complex64>);

impl AdmittanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_matrix(m: DMatrix<Complex64>) -> Self {
        assert!(m.is_square(), "admittance matrix must be square");
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.0[(i, j)]
    }

    #[inline]
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)].re
    }

    #[inline]
    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)].im
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.0
    }

    /// Add a symmetric series element between `i` and `j`.
    pub fn stamp_series(&mut self, i: usize, j: usize, y: Complex64) {
        self.0[(i, i)] += y;
        self.0[(j, j)] += y;
        self.0[(i, j)] -= y;
        self.0[(j, i)] -= y;
    }

    pub fn stamp_shunt(&mut self, i: usize, y: Complex64) {
        self.0[(i, i)] += y;
    }

    /// Largest |Y_ij - Y_ji|.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)]).norm());
            }
        }
        worst
    }

    pub fn row_sum(&self, i: usize) -> Complex64 {
        self.0.row(i).iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Apply to a complex vector: `I = Y V`.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        assert_eq!(v.len(), n);
        (0..n).map(|i| (0..n).map(|j| self.0[(i, j)] * v[j]).sum()).collect()
    }
}

/// Build `Y` from the Pi-model stamps of every line plus the bus shunts.
pub fn assemble_admittance(grid: &GridCase) -> Result<AdmittanceMatrix, GridError> {
    let n = grid.n_buses();
    let map = grid.index_map();
    let mut y = AdmittanceMatrix::zeros(n);
    for line in &grid.lines {
        let (i, j) = (map[&line.from], map[&line.to]);
        y.stamp_series(i, j, line_admittance(line)?);
        let half = Complex64::new(0.0, line.y_sh / 2.0);
        y.stamp_shunt(i, half);
        y.stamp_shunt(j, half);
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        y.stamp_shunt(i, Complex64::new(bus.shunt_g, bus.shunt_b));
    }
    Ok(y)
}
