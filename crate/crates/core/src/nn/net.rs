use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{softmax_rows, Loss};
use super::NnError;

/// One example per entry: indices of the active (value 1) input features.
pub type Features = [Vec<u32>];

/// Fully connected ReLU network. Parameters live in one flat buffer, layer by
/// layer, each layer as a row-major `out x in` weight block then its biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Tape {
    /// Per layer, `batch x out` pre-activations.
    pre: Vec<Vec<f64>>,
    /// ReLU of each hidden layer's pre-activations.
    act: Vec<Vec<f64>>,
}

/// Strided view of a dense matrix: `(data, row stride, column stride)`.
type View<'a> = (&'a [f64], isize, isize);

/// `C <- A B + beta C` for an `m x k` times `k x n` product, C row-major.
fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2) && c.len() >= m * n);
    // SAFETY: the assertion above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl DenseNet {
    /// Fan-in scaled uniform weights `U(-1/sqrt(in), 1/sqrt(in))`, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        for (l, &fan_in) in sizes[..net.num_layers()].iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let (w, _) = net.layer_ranges(l);
            for x in &mut net.params[w] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; n] })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape(format!("{} parameters for sizes {sizes:?}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Shape("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_outputs(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Weight and bias index ranges of layer `l`.
    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        let w_end = start + self.sizes[l] * self.sizes[l + 1];
        (start..w_end, w_end..w_end + self.sizes[l + 1])
    }

    /// Layer owning flat parameter `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        (0..self.num_layers()).find(|&l| i < self.layer_ranges(l).1.end).expect("index in range")
    }

    fn check_features(&self, features: &Features) -> Result<(), NnError> {
        let width = self.input_width();
        for (k, idx) in features.iter().enumerate() {
            if let Some(bad) = idx.iter().find(|&&i| i as usize >= width) {
                return Err(NnError::Shape(format!("example {k}: feature {bad} >= input width {width}")));
            }
        }
        Ok(())
    }

    fn run(&self, features: &Features) -> Tape {
        let batch = features.len();
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers() - 1);
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_ranges(l);
            let (w, b) = (&self.params[wr], &self.params[br]);
            let mut z = Vec::with_capacity(batch * n_out);
            for idx in features {
                if l == 0 {
                    z.extend((0..n_out).map(|j| b[j] + idx.iter().map(|&i| w[j * n_in + i as usize]).sum::<f64>()));
                } else {
                    z.extend_from_slice(b);
                }
            }
            if l > 0 {
                // Z = A W^T + 1 b^T
                let ni = n_in as isize;
                gemm(batch, n_in, n_out, (&act[l - 1], ni, 1), (w, 1, ni), 1.0, &mut z);
            }
            if l + 1 < self.num_layers() {
                act.push(z.iter().map(|x| x.max(0.0)).collect());
            }
            pre.push(z);
        }
        Tape { pre, act }
    }

    /// Raw output layer, `batch x outputs` row-major.
    pub fn logits(&self, features: &Features) -> Result<Vec<f64>, NnError> {
        self.check_features(features)?;
        Ok(self.run(features).pre.pop().expect("at least one layer"))
    }

    /// Softmax probabilities per example.
    pub fn forward(&self, features: &Features) -> Result<Vec<Vec<f64>>, NnError> {
        Ok(softmax_rows(&self.logits(features)?, self.num_outputs()))
    }

    /// Loss value and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, features: &Features, loss: &Loss) -> Result<(f64, Vec<f64>), NnError> {
        self.check_features(features)?;
        let tape = self.run(features);
        let logits = tape.pre.last().expect("at least one layer");
        let (value, dlogits) = loss.value_and_dlogits(logits, self.num_outputs(), features.len())?;
        let grad = self.backward(features, &tape, dlogits)?;
        Ok((value, grad))
    }

    pub fn loss(&self, features: &Features, loss: &Loss) -> Result<f64, NnError> {
        let logits = self.logits(features)?;
        Ok(loss.value_and_dlogits(&logits, self.num_outputs(), features.len())?.0)
    }

    fn backward(&self, features: &Features, tape: &Tape, mut delta: Vec<f64>) -> Result<Vec<f64>, NnError> {
        let batch = features.len();
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_ranges(l);
            let w = &self.params[wr.clone()];
            let (gw, rest) = grad[wr.start..].split_at_mut(wr.len());
            let gb = &mut rest[..br.len()];
            for d in delta.chunks_exact(n_out) {
                for (gbj, dj) in gb.iter_mut().zip(d) {
                    *gbj += dj;
                }
            }
            let mut next = Vec::new();
            if l == 0 {
                for (idx, d) in features.iter().zip(delta.chunks_exact(n_out)) {
                    for &i in idx {
                        for (j, dj) in d.iter().enumerate() {
                            gw[j * n_in + i as usize] += dj;
                        }
                    }
                }
            } else {
                let (ni, no) = (n_in as isize, n_out as isize);
                // dW = D^T A, dA = D W masked by the ReLU
                gemm(n_out, batch, n_in, (&delta, 1, no), (&tape.act[l - 1], ni, 1), 0.0, gw);
                next = vec![0.0; batch * n_in];
                gemm(batch, n_out, n_in, (&delta, no, 1), (w, ni, 1), 0.0, &mut next);
                for (b, zi) in next.iter_mut().zip(&tape.pre[l - 1]) {
                    if *zi <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            if grad[wr.start..br.end].iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient { layer: l });
            }
            delta = next;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    #[test]
    fn zero_net_is_uniform() {
        let net = DenseNet::zeros(&[4, 8, 3]).unwrap();
        let p = net.forward(&[vec![0, 2], vec![]]).unwrap();
        for row in p {
            for x in row {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parameter_count_and_layout() {
        let net = DenseNet::zeros(&[5, 7, 2]).unwrap();
        assert_eq!(net.num_params(), 5 * 7 + 7 + 7 * 2 + 2);
        assert_eq!(net.layer_of(0), 0);
        assert_eq!(net.layer_of(41), 0);
        assert_eq!(net.layer_of(42), 1);
        assert!(DenseNet::zeros(&[3]).is_err());
        assert!(DenseNet::zeros(&[3, 0, 2]).is_err());
        assert!(DenseNet::from_params(&[2, 2], vec![0.0; 5]).is_err());
    }

    #[test]
    fn single_layer_logits_are_linear() {
        // logits = W x + b with x = e_1
        let net = DenseNet::from_params(&[2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(net.logits(&[vec![1]]).unwrap(), vec![2.5, 3.5]);
        assert!(net.logits(&[vec![2]]).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let a = DenseNet::new(&[10, 16, 4], &mut stream_rng(1, 0)).unwrap();
        let b = DenseNet::new(&[10, 16, 4], &mut stream_rng(1, 0)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.params()[..160].iter().all(|w| w.abs() < bound));
        assert!(a.params()[160..176].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut net = DenseNet::new(&[3, 4, 2], &mut stream_rng(2, 0)).unwrap();
        // first output-layer weight
        net.params_mut()[3 * 4 + 4] = f64::NAN;
        let loss = Loss::Td { actions: &[0], targets: &[0.0] };
        match net.loss_and_grad(&[vec![0]], &loss) {
            Err(NnError::NonFiniteGradient { layer }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }
}
