use rand::Rng;

use super::Episode;
use crate::error::{Error, Result};
use crate::rng::{stream, streams};

/// Drops each interior EHR row independently with probability `rate`.
/// The first and last rows are always kept.
pub fn inject_missing_ehr(episode: &Episode, rate: f64, seed: u64) -> Result<Episode> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("missing rate must lie in [0, 1], got {rate}")));
    }
    let m = episode.ehr_times.len();
    if m < 2 {
        return Err(Error::contract(format!(
            "{}: need at least 2 EHR rows to drop from, got {m}",
            episode.patient_id
        )));
    }
    let mut rng = stream(seed, streams::MISSING_BASE);
    let mut out = episode.clone();
    out.ehr_times.clear();
    out.ehr_values.clear();
    for j in 0..m {
        // draw for every row so the pattern does not depend on boundary handling
        let drop = rng.random::<f64>() < rate;
        if j == 0 || j == m - 1 || !drop {
            out.ehr_times.push(episode.ehr_times[j]);
            out.ehr_values.push(episode.ehr_values[j].clone());
        }
    }
    Ok(out)
}
