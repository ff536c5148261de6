/// Reduce-on-plateau learning-rate rule driven by a validation metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            lr,
            factor,
            patience,
            threshold: 1e-4,
            min_lr: 1e-7,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) || self.best == f64::INFINITY {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_history_keeps_lr() {
        let mut p = Plateau::new(1e-4, 0.3, 10);
        for e in 0..50 {
            assert_eq!(p.step(10.0 - e as f64 * 0.1), 1e-4);
        }
    }

    #[test]
    fn eleven_flat_epochs_decay_once() {
        let mut p = Plateau::new(1e-4, 0.3, 10);
        let lrs: Vec<f64> = (0..11).map(|_| p.step(1.0)).collect();
        assert!(lrs[..10].iter().all(|&lr| lr == 1e-4));
        assert!((lrs[10] - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn alternating_improve_and_stall_never_decays() {
        let mut p = Plateau::new(1e-4, 0.3, 10);
        let mut v = 100.0;
        for e in 0..200 {
            if e % 2 == 0 {
                v *= 0.99;
            }
            assert_eq!(p.step(v), 1e-4);
        }
    }

    #[test]
    fn floor_is_respected() {
        let mut p = Plateau::new(1e-6, 0.3, 1);
        for _ in 0..20 {
            p.step(1.0);
        }
        assert_eq!(p.lr, 1e-7);
    }
}
