use std::time::Duration;

use rand::Rng;

pub use crate::error::ErrorClass;

/// Total attempts allowed for retryable error classes.
pub const MAX_ATTEMPTS: u32 = 6;
pub const BASE_DELAY: Duration = Duration::from_secs(1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RetryDecision {
    Retry(Duration),
    GiveUp,
}

/// Exponential backoff with full jitter: after failed attempt `attempt`
/// (1-based) wait a uniform delay in `[0, BASE_DELAY * 2^(attempt-1)]`.
pub fn retry_policy<R: Rng + ?Sized>(attempt: u32, class: ErrorClass, rng: &mut R) -> RetryDecision {
    let attempt = attempt.max(1);
    if !class.is_retryable() || attempt >= MAX_ATTEMPTS {
        return RetryDecision::GiveUp;
    }
    let ceiling = BASE_DELAY.as_secs_f64() * f64::from(1u32 << (attempt - 1));
    RetryDecision::Retry(Duration::from_secs_f64(rng.gen_range(0.0..=ceiling)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_examples() {
        let mut rng = rand::thread_rng();
        assert_eq!(retry_policy(7, ErrorClass::RateLimited, &mut rng), RetryDecision::GiveUp);
        assert_eq!(retry_policy(1, ErrorClass::BadRequest, &mut rng), RetryDecision::GiveUp);
        assert_eq!(retry_policy(1, ErrorClass::Auth, &mut rng), RetryDecision::GiveUp);
        for _ in 0..200 {
            match retry_policy(1, ErrorClass::RateLimited, &mut rng) {
                RetryDecision::Retry(d) => assert!(d <= Duration::from_secs(1)),
                RetryDecision::GiveUp => panic!("first attempt must retry"),
            }
        }
    }

    #[test]
    fn ceiling_doubles_until_the_attempt_cap() {
        let mut rng = rand::thread_rng();
        for attempt in 1..MAX_ATTEMPTS {
            let cap = Duration::from_secs(1 << (attempt - 1));
            for class in [ErrorClass::RateLimited, ErrorClass::ServerError, ErrorClass::Network] {
                match retry_policy(attempt, class, &mut rng) {
                    RetryDecision::Retry(d) => assert!(d <= cap),
                    RetryDecision::GiveUp => panic!("attempt {attempt} should retry"),
                }
            }
        }
        assert_eq!(retry_policy(MAX_ATTEMPTS, ErrorClass::Network, &mut rng), RetryDecision::GiveUp);
    }
}
