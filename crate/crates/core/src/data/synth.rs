//! Seeded synthetic cities for desk-scale runs.
//!
//! A city is a sparse grid of straight roads. Each road has a fixed direction
//! code and base volume/speed; per-frame values follow a two-peak diurnal
//! curve with seeded noise. Off-road pixels are all-zero, and on-road pixels
//! occasionally drop out to all-zero as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DayFile, FrameStack, CHANNELS, FRAMES_PER_DAY};
use crate::error::{Error, Result};

/// Direction bytes used on roads (every legal code except 0, which the
/// off-road background already uses).
const ROAD_CODES: [u8; 4] = [1, 85, 170, 255];
const DROPOUT: f64 = 0.02;
const NOISE: f64 = 4.0;

#[derive(Debug, Clone, Copy)]
struct Road {
    code: u8,
    volume: f64,
    speed: f64,
}

fn diurnal(frame: usize) -> f64 {
    let hour = frame as f64 * 24.0 / FRAMES_PER_DAY as f64;
    let bump = |centre: f64, width: f64| (-(hour - centre).powi(2) / (2.0 * width * width)).exp();
    (0.15 + 0.85 * (bump(8.0, 1.5) + 0.9 * bump(17.5, 2.0))).min(1.0)
}

fn pick_lines(rng: &mut ChaCha8Rng, extent: usize) -> Vec<usize> {
    let n = (extent / 6).max(1);
    let mut lines: Vec<usize> = Vec::with_capacity(n);
    while lines.len() < n {
        let l = rng.gen_range(0..extent);
        if !lines.contains(&l) {
            lines.push(l);
        }
    }
    lines.sort_unstable();
    lines
}

fn road_map(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<Option<Road>> {
    let mut map = vec![None; height * width];
    let new_road = |rng: &mut ChaCha8Rng| Road {
        code: ROAD_CODES[rng.gen_range(0..ROAD_CODES.len())],
        volume: rng.gen_range(60.0..200.0),
        speed: rng.gen_range(80.0..220.0),
    };
    for row in pick_lines(rng, height) {
        let road = new_road(rng);
        for col in 0..width {
            map[row * width + col] = Some(road);
        }
    }
    for col in pick_lines(rng, width) {
        let road = new_road(rng);
        for row in 0..height {
            map[row * width + col] = Some(road);
        }
    }
    map
}

fn clamp_byte(v: f64) -> u8 {
    v.round().clamp(1.0, 255.0) as u8
}

/// `days` canonical day files for one city, byte-identical for a given seed.
pub fn generate_synthetic_city(
    city: &str,
    seed: u64,
    days: usize,
    height: usize,
    width: usize,
) -> Result<Vec<DayFile>> {
    if height < 8 || width < 8 {
        return Err(Error::Invalid(format!(
            "synthetic city needs at least 8x8 pixels, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roads = road_map(&mut rng, height, width);
    let jitter: Vec<f64> = (0..height * width)
        .map(|_| rng.gen_range(0.9..1.1))
        .collect();

    let mut out = Vec::with_capacity(days);
    for _ in 0..days {
        let day_factor = rng.gen_range(0.85..1.15);
        let mut frames = FrameStack::zeros(FRAMES_PER_DAY, height, width);
        for t in 0..FRAMES_PER_DAY {
            let load = diurnal(t) * day_factor;
            for (p, road) in roads.iter().enumerate() {
                let Some(road) = road else { continue };
                if rng.gen_bool(DROPOUT) {
                    continue;
                }
                let volume = road.volume * load * jitter[p] + rng.gen_range(-NOISE..NOISE);
                let speed = road.speed * (1.0 - 0.35 * load) + rng.gen_range(-NOISE..NOISE);
                let i = t * height * width * CHANNELS + p * CHANNELS;
                frames.data_mut()[i..i + CHANNELS].copy_from_slice(&[
                    clamp_byte(volume),
                    clamp_byte(speed),
                    road.code,
                ]);
            }
        }
        out.push(DayFile {
            city: city.to_string(),
            frames,
        });
    }
    Ok(out)
}
