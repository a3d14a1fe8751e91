const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-12;

/// Elementwise Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

/// Adam whose second moment is shared by each row of `width` parameters
/// (the mean of the squared gradients of that row).
#[derive(Debug, Clone)]
pub struct RowAdam {
    lr: f64,
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RowAdam {
    pub fn new(rows: usize, width: usize, lr: f64) -> Self {
        Self {
            lr,
            width,
            m: vec![0.0; rows * width],
            v: vec![0.0; rows],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        let w = self.width;
        for (r, v) in self.v.iter_mut().enumerate() {
            let g = &grads[r * w..(r + 1) * w];
            let sq = g.iter().map(|x| x * x).sum::<f64>() / w as f64;
            *v = BETA2 * *v + (1.0 - BETA2) * sq;
            let denom = (*v / c2).sqrt() + EPS;
            for ((p, &gj), m) in params[r * w..(r + 1) * w].iter_mut().zip(g).zip(&mut self.m[r * w..(r + 1) * w]) {
                *m = BETA1 * *m + (1.0 - BETA1) * gj;
                *p -= self.lr * (*m / c1) / denom;
            }
        }
    }
}
