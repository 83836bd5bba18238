use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list over `n` joints.
///
/// Edge direction is ignored. The self-loops keep isolated joints well defined.
pub fn normalized_adjacency(edges: &[(usize, usize)], n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Layout("graph with no joints".into()));
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::Layout(format!("edge ({i}, {j}) out of range for {n} joints")));
        }
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let degree: Vec<f64> = a.chunks(n).map(|row| row.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= (degree[i] * degree[j]).sqrt();
        }
    }
    Tensor::matrix(n, n, a)
}

/// `relu(adjacency · X · Θ)` applied to each `N`-row frame block of `x`.
pub fn graph_conv(tape: &mut Tape, adjacency: Var, theta: Var, x: Var) -> Result<Var> {
    let mixed = tape.propagate(adjacency, x)?;
    let projected = tape.matmul(mixed, theta)?;
    tape.relu(projected)
}

/// A single graph convolution with fixed normalized adjacency, a learnable
/// additive adjacency offset, and learnable channel weights.
#[derive(Clone, Debug)]
pub struct GraphConvLayer {
    pub adjacency: Tensor,
    pub offset: Tensor,
    pub theta: Tensor,
}

impl GraphConvLayer {
    pub fn new(adjacency: Tensor, theta: Tensor) -> Result<Self> {
        let (n, n2) = adjacency.dims2()?;
        if n != n2 {
            return Err(Error::Shape(format!("adjacency must be square, got {n}×{n2}")));
        }
        theta.dims2()?;
        Ok(Self {
            offset: Tensor::zeros(&[n, n]),
            adjacency,
            theta,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.theta.shape()[1]
    }

    /// Binds the weights as leaves and applies the layer to `features`
    /// (`N×C_in`, or stacked frames `(G·N)×C_in`).
    ///
    /// Returns `(output, theta, offset)` handles.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<(Var, Var, Var)> {
        let c = tape.value(features).dims2()?.1;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "features have {c} channels, layer expects {}",
                self.in_channels()
            )));
        }
        let base = tape.constant(self.adjacency.clone());
        let offset = tape.leaf(self.offset.clone());
        let theta = tape.leaf(self.theta.clone());
        let adjacency = tape.add(base, offset)?;
        let out = graph_conv(tape, adjacency, theta, features)?;
        Ok((out, theta, offset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::skeleton::SkeletonLayout;

    #[test]
    fn single_joint_and_pair() {
        assert_eq!(normalized_adjacency(&[], 1).unwrap().data(), &[1.0]);
        assert_eq!(normalized_adjacency(&[(0, 1)], 2).unwrap().data(), &[0.5; 4]);
        assert!(matches!(normalized_adjacency(&[(0, 2)], 2), Err(Error::Layout(_))));
    }

    #[test]
    fn isolated_joint_keeps_self_loop() {
        let a = normalized_adjacency(&[(0, 1)], 3).unwrap();
        assert_eq!(a.at(2, 2), 1.0);
        assert_eq!(a.at(2, 0), 0.0);
    }

    #[test]
    fn full_layout_symmetric_with_spectrum_in_unit_interval() {
        let layout = SkeletonLayout::standard();
        let a = normalized_adjacency(layout.edges(), 87).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(87, 87, a.data());
        assert!((&m - m.transpose()).abs().max() < 1e-15);
        let eig = m.symmetric_eigen();
        for &ev in eig.eigenvalues.iter() {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ev), "{ev}");
        }
        // A + I with self-loops always has the top eigenvalue exactly 1.
        let top = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        assert!((top - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let layer = GraphConvLayer::new(Tensor::identity(3), Tensor::identity(2)).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.5, 0.3, 4.0, 0.0]).unwrap();
        let xv = tape.constant(x.clone());
        let (out, _, _) = layer.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn two_joint_chain_hand_value() {
        // Â = 0.5·ones; X = [[1, 2], [3, -1]] → ÂX = [[2, 0.5], [2, 0.5]]
        // Θ = [[1, -1], [0.5, 2]] → [[2.25, -1], [2.25, -1]] → relu
        let a = normalized_adjacency(&[(0, 1)], 2).unwrap();
        let theta = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let layer = GraphConvLayer::new(a, theta).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let (out, _, _) = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out).data(), &[2.25, 0.0, 2.25, 0.0]);
    }

    #[test]
    fn gradient_wrt_theta_matches_finite_differences() {
        let layout = SkeletonLayout::standard();
        let a = normalized_adjacency(layout.edges(), 87).unwrap();
        let x = Tensor::matrix(87 * 2, 3, (0..87 * 6).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect())
            .unwrap();
        let theta = Tensor::matrix(3, 4, vec![0.4, -0.3, 0.8, 0.1, -0.6, 0.5, 0.2, 0.9, 0.3, 0.7, -0.2, -0.4])
            .unwrap();
        let offset = Tensor::zeros(&[87, 87]);
        let report = finite_diff_check(
            |tape, vars| {
                let base = tape.constant(a.clone());
                let adj = tape.add(base, vars[1])?;
                let xv = tape.constant(x.clone());
                let h = graph_conv(tape, adj, vars[0], xv)?;
                let h = tape.exp(h)?;
                tape.mean(h)
            },
            &[theta, offset],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn stacked_propagation_gradients_match_finite_differences() {
        // two layers without the rectifier, so the check also covers a
        // propagated input that itself carries a gradient
        let a = normalized_adjacency(&[(0, 1), (1, 2), (2, 3), (3, 4)], 5).unwrap();
        let x = Tensor::matrix(10, 2, (0..20).map(|i| ((i * 7 % 11) as f64 / 5.0) - 1.0).collect()).unwrap();
        let t1 = Tensor::matrix(2, 3, vec![0.4, -0.3, 0.8, 0.1, -0.6, 0.5]).unwrap();
        let t2 = Tensor::matrix(3, 2, vec![0.2, 0.9, 0.3, 0.7, -0.2, -0.4]).unwrap();
        let o1 = Tensor::matrix(5, 5, (0..25).map(|i| (i as f64 - 12.0) / 100.0).collect()).unwrap();
        let o2 = Tensor::matrix(5, 5, (0..25).map(|i| ((i * 3 % 7) as f64 - 3.0) / 50.0).collect()).unwrap();
        let report = finite_diff_check(
            |tape, vars| {
                let base = tape.constant(a.clone());
                let adj1 = tape.add(base, vars[1])?;
                let adj2 = tape.add(base, vars[3])?;
                let h = tape.propagate(adj1, vars[4])?;
                let h = tape.matmul(h, vars[0])?;
                let h = tape.propagate(adj2, h)?;
                let h = tape.matmul(h, vars[2])?;
                let h = tape.exp(h)?;
                tape.mean(h)
            },
            &[t1, o1, t2, o2, x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
