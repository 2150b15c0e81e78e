use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub colour: Vec<f64>,
    /// Transmittance reaching each sample, `T_i`.
    pub transmittance: Vec<f64>,
    /// Transmittance left after the last sample.
    pub final_transmittance: f64,
    /// `T_i * alpha_i`.
    pub weights: Vec<f64>,
}

/// Alpha compositing along one ray with the running-product recurrence.
/// `colours` holds `channels` values per sample.
pub fn composite(
    sigmas: &[f64],
    colours: &[f64],
    deltas: &[f64],
    channels: usize,
) -> Result<Composite> {
    let m = sigmas.len();
    if deltas.len() != m || colours.len() != m * channels {
        return Err(Error::domain("composite inputs disagree in length"));
    }
    if sigmas.iter().chain(deltas).any(|v| *v < 0.0 || v.is_nan()) {
        return Err(Error::domain(
            "densities and interval lengths must be non-negative",
        ));
    }
    let mut colour = vec![0.0; channels];
    let mut transmittance = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut t = 1.0;
    for i in 0..m {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = t * alpha;
        transmittance.push(t);
        weights.push(w);
        for (c, v) in colour
            .iter_mut()
            .zip(&colours[i * channels..(i + 1) * channels])
        {
            *c += w * v;
        }
        t *= 1.0 - alpha;
    }
    Ok(Composite {
        colour,
        transmittance,
        final_transmittance: t,
        weights,
    })
}
