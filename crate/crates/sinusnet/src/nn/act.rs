//! Pointwise activations.

use ndarray::Array5;

/// Leaky ReLU; slope 0 gives plain ReLU.
pub struct LeakyRelu {
    slope: f64,
    // derivative at each cached input position
    dmask: Option<Array5<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, dmask: None }
    }

    pub fn relu() -> Self {
        LeakyRelu::new(0.0)
    }

    pub fn forward(&mut self, x: &Array5<f64>, train: bool) -> Array5<f64> {
        let slope = self.slope;
        let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.dmask = train.then(|| x.mapv(|v| if v > 0.0 { 1.0 } else { slope }));
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let mask = self.dmask.take().expect("activation backward without cached forward");
        dy * &mask
    }
}

/// Leaky ReLU over `(batch, features)` activations.
pub struct LeakyRelu2d {
    slope: f64,
    dmask: Option<ndarray::Array2<f64>>,
}

impl LeakyRelu2d {
    pub fn new(slope: f64) -> Self {
        LeakyRelu2d { slope, dmask: None }
    }

    pub fn relu() -> Self {
        LeakyRelu2d::new(0.0)
    }

    pub fn forward(&mut self, x: &ndarray::Array2<f64>, train: bool) -> ndarray::Array2<f64> {
        let slope = self.slope;
        let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.dmask = train.then(|| x.mapv(|v| if v > 0.0 { 1.0 } else { slope }));
        y
    }

    pub fn backward(&mut self, dy: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
        let mask = self.dmask.take().expect("activation backward without cached forward");
        dy * &mask
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
