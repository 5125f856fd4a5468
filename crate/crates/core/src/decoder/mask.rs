use rand::Rng;

/// Square attention mask over queries; `true` blocks attention from the row
/// query to the column query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn open(n: usize) -> Self {
        AttentionMask {
            n,
            blocked: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                blocked.push(f(a, b));
            }
        }
        AttentionMask { n, blocked }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_blocked(&self, a: usize, b: usize) -> bool {
        self.blocked[a * self.n + b]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.blocked
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }
}

/// Blocking probability for intra-instance entries during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub epsilon: f64,
    pub seed: u64,
}

impl MaskConfig {
    pub const DEFAULT_EPSILON: f64 = 0.1;
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            epsilon: Self::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

/// Inner-instance mask: entries between different instances are blocked.
///
/// In training mode every off-diagonal intra-instance entry is additionally
/// blocked with probability `epsilon`, drawn independently per entry. The
/// diagonal is never blocked, so no row is ever fully masked.
pub fn build_instance_mask(
    instance_of: &[usize],
    epsilon: f64,
    rng: &mut impl Rng,
    training: bool,
) -> AttentionMask {
    assert!(
        (0.0..1.0).contains(&epsilon),
        "epsilon must lie in [0, 1), got {epsilon}"
    );
    let draw = training && epsilon > 0.0;
    AttentionMask::from_fn(instance_of.len(), |a, b| {
        if a == b {
            false
        } else if instance_of[a] != instance_of[b] {
            true
        } else {
            draw && rng.gen_bool(epsilon)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(n_i: usize, n_p: usize) -> Vec<usize> {
        (0..n_i * n_p).map(|j| j / n_p).collect()
    }

    #[test]
    fn two_by_three_block_diagonal() {
        let m = build_instance_mask(&layout(2, 3), 0.0, &mut ChaCha8Rng::seed_from_u64(0), true);
        assert_eq!(m.size(), 6);
        assert_eq!(m.blocked_count(), 18);
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(m.is_blocked(a, b), a / 3 != b / 3);
            }
        }
    }

    #[test]
    fn zero_epsilon_train_equals_eval() {
        let l = layout(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = build_instance_mask(&l, 0.0, &mut rng, true);
        let e = build_instance_mask(&l, 0.0, &mut rng, false);
        assert_eq!(t, e);
    }

    #[test]
    fn eval_ignores_epsilon() {
        let l = layout(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = build_instance_mask(&l, 0.7, &mut rng, false);
        let b = build_instance_mask(&l, 0.0, &mut rng, false);
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_half_blocks_half_of_intra_entries() {
        let l = layout(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut blocked, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let m = build_instance_mask(&l, 0.5, &mut rng, true);
            for a in 0..6 {
                assert!(!m.is_blocked(a, a));
                for b in 0..6 {
                    if a != b && a / 3 == b / 3 {
                        total += 1;
                        blocked += m.is_blocked(a, b) as usize;
                    }
                }
            }
        }
        let frac = blocked as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }
}
