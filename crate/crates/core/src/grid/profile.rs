//! Per-slot series: dimensionless load multipliers or energy prices.

use thiserror::Error;

/// A nonnegative length-`T` series.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub values: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("profile has {got} slots, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("negative value {value} at slot {slot}")]
    Negative { slot: usize, value: f64 },
}

impl Profile {
    /// Constant profile of the given length.
    pub fn flat(value: f64, len: usize) -> Profile {
        Profile { values: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, expected_len: usize) -> Result<(), ProfileError> {
        if self.values.len() != expected_len {
            return Err(ProfileError::Length {
                expected: expected_len,
                got: self.values.len(),
            });
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ProfileError::Negative { slot: i + 1, value: v });
            }
        }
        Ok(())
    }
}

/// Parse a `slot,value` CSV (header required, slots must run 1..T in order).
pub fn parse_profile_csv(text: &str) -> Result<Profile, ProfileError> {
    let mut values = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "slot,value" => {}
        Some((_, header)) => {
            return Err(ProfileError::Malformed {
                line: 1,
                message: format!("expected header \"slot,value\", got {header:?}"),
            })
        }
        None => {
            return Err(ProfileError::Malformed {
                line: 1,
                message: "empty profile".to_string(),
            })
        }
    }
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let slot: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| ProfileError::Malformed {
                line: line_no,
                message: "cannot parse slot".to_string(),
            })?;
        let value: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| ProfileError::Malformed {
                line: line_no,
                message: "cannot parse value".to_string(),
            })?;
        if slot != values.len() + 1 {
            return Err(ProfileError::Malformed {
                line: line_no,
                message: format!("slots must run 1..T in order; expected {}, got {}", values.len() + 1, slot),
            });
        }
        if value < 0.0 || !value.is_finite() {
            return Err(ProfileError::Negative { slot, value });
        }
        values.push(value);
    }
    Ok(Profile { values })
}

/// Render a profile in the same CSV schema.
pub fn to_csv(profile: &Profile) -> String {
    let mut out = String::from("slot,value\n");
    for (i, v) in profile.values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_in_order_series() {
        let p = parse_profile_csv("slot,value\n1,0.5\n2,1.25\n3,2.0\n").unwrap();
        assert_eq!(p.values, vec![0.5, 1.25, 2.0]);
    }

    #[test]
    fn rejects_out_of_order_slots() {
        let err = parse_profile_csv("slot,value\n1,0.5\n3,1.0\n").unwrap_err();
        assert!(matches!(err, ProfileError::Malformed { line: 3, .. }));
    }

    #[test]
    fn rejects_negative_values() {
        let err = parse_profile_csv("slot,value\n1,-0.5\n").unwrap_err();
        assert!(matches!(err, ProfileError::Negative { slot: 1, .. }));
    }

    #[test]
    fn csv_round_trip() {
        let p = Profile { values: vec![1.0, 0.25, 3.5] };
        assert_eq!(parse_profile_csv(&to_csv(&p)).unwrap(), p);
    }
}
