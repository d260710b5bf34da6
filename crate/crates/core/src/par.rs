//! Data-parallel helpers. With the `parallel` feature (default) work is
//! spread over the rayon pool; without it the same closures run in order.
//! Either way results come back in input order, so reductions done by the
//! caller are deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Like [`map`], but stops at the first error (in input order).
pub fn try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Mixes a run seed with up to three stream coordinates into an independent
/// sub-seed (splitmix64 finalizer over a simple combination).
pub fn derive_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..100).collect();
        let ys = map(&xs, |i, x| (i as u64) * 1000 + x);
        assert_eq!(ys, (0..100).map(|x| x * 1001).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_wins() {
        let xs: Vec<i32> = (0..10).collect();
        let r = try_map(&xs, |_, &x| {
            if x >= 4 {
                Err(crate::Error::invalid(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), crate::Error::invalid("bad 4").to_string());
    }

    #[test]
    fn derived_seeds_differ_per_coordinate() {
        let base = derive_seed(7, 1, 2, 3);
        assert_eq!(base, derive_seed(7, 1, 2, 3));
        assert_ne!(base, derive_seed(7, 1, 2, 4));
        assert_ne!(base, derive_seed(7, 2, 1, 3));
        assert_ne!(base, derive_seed(8, 1, 2, 3));
    }
}
