//! Exact minimum-cost bipartite assignment (Hungarian method with row and
//! column potentials, O(n³)) used to re-pair mini-batches for OT-CFM.

/// Square cost matrix in row-major order.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "cost matrix must be n x n");
        CostMatrix { n, data }
    }

    /// Squared Euclidean costs between the rows of `a` and `b`.
    pub fn squared_euclidean(a: &[Vec<f64>], b: &[Vec<f64>]) -> Self {
        assert_eq!(a.len(), b.len());
        let n = a.len();
        let mut data = Vec::with_capacity(n * n);
        for ra in a {
            for rb in b {
                data.push(crate::numeric::sq_dist(ra, rb));
            }
        }
        CostMatrix { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Total cost of assigning row `i` to column `perm[i]`, summed in row order.
pub fn assignment_cost(cost: &CostMatrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum()
}

/// Minimum-cost perfect matching; returns `perm` with row `i` matched to
/// column `perm[i]`.
pub fn min_cost_assignment(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n;
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual column used while augmenting.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    perm
}
