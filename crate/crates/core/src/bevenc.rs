//! Frozen bird's-eye-view encoder surrogate: a rasterizer into a 32×32×9
//! grid followed by a fixed, seeded 3×3 mixing convolution and `tanh`.

use std::path::Path;

use bella_numcore::{ParamStore, SplitMix64, Tape, Tensor};

use crate::error::{BellaError, Result};
use crate::scenesim::{Scene, EXTENT};

pub const GRID: usize = 32;
pub const CHANNELS: usize = 9;
pub const CELL_METRES: f64 = 2.0;
pub const SPEED_NORM: f64 = 15.0;
pub const CH_SPEED: usize = 6;
pub const CH_COS: usize = 7;
pub const CH_SIN: usize = 8;
/// Cell holding the ego vehicle; its speed channel carries the ego speed.
pub const EGO_CELL: (usize, usize) = (16, 16);

/// Seed of the canonical mixing kernels. Independent of any run seed.
pub const ENCODER_SEED: u64 = 0xBE7_0E4C;
/// Kernel entries are drawn uniformly from `[-KERNEL_BOUND, KERNEL_BOUND]`.
pub const KERNEL_BOUND: f64 = 0.5;

pub const PREFIX: &str = "bevenc/";

/// Rasterized scene, `[H×W×C]` row-major. Row 0 is the far-front edge.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub tensor: Tensor<f32>,
}

impl BevGrid {
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.tensor.data()[(row * GRID + col) * CHANNELS + ch]
    }

    /// Writes the grid as a single-record checkpoint file for external viewers.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = ParamStore::new();
        s.insert("bev/grid", self.tensor.clone());
        s.save(path)?;
        Ok(())
    }
}

/// `(row, col)` of a metric position, or `None` outside the grid.
pub fn cell_of(x: f64, y: f64) -> Option<(usize, usize)> {
    let row = ((EXTENT - x) / CELL_METRES).floor();
    let col = ((y + EXTENT) / CELL_METRES).floor();
    let ok = |v: f64| (0.0..GRID as f64).contains(&v);
    (ok(row) && ok(col)).then_some((row as usize, col as usize))
}

pub fn rasterize(scene: &Scene) -> Result<BevGrid> {
    let mut data = vec![0f32; GRID * GRID * CHANNELS];
    let mut put = |r: usize, c: usize, ch: usize, v: f32| {
        let i = (r * GRID + c) * CHANNELS + ch;
        data[i] = data[i].max(v);
    };
    for a in &scene.actors {
        let (r, c) = cell_of(a.x, a.y).ok_or(BellaError::OutsideExtent {
            id: a.id,
            x: a.x,
            y: a.y,
        })?;
        put(r, c, a.class.index(), 1.0);
        let speed = a.speed();
        if speed > 0.0 {
            put(r, c, CH_SPEED, (speed / SPEED_NORM).min(1.0) as f32);
            put(r, c, CH_COS, (a.vx / speed) as f32);
            put(r, c, CH_SIN, (a.vy / speed) as f32);
        }
    }
    put(
        EGO_CELL.0,
        EGO_CELL.1,
        CH_SPEED,
        (scene.ego_speed / SPEED_NORM).clamp(0.0, 1.0) as f32,
    );
    Ok(BevGrid {
        tensor: Tensor::new(&[GRID, GRID, CHANNELS], data)?,
    })
}

/// Never-trained mixing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderParams {
    /// `[C×C×3×3]`
    pub kernel: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl FrozenEncoderParams {
    pub fn canonical() -> Self {
        let mut rng = SplitMix64::derive(ENCODER_SEED, "bevenc/mix");
        let n = CHANNELS * CHANNELS * 9;
        let k: Vec<f32> = (0..n)
            .map(|_| rng.uniform(-KERNEL_BOUND, KERNEL_BOUND) as f32)
            .collect();
        Self {
            kernel: Tensor::new(&[CHANNELS, CHANNELS, 3, 3], k).expect("static shape"),
            bias: Tensor::zeros(&[CHANNELS]),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(format!("{PREFIX}kernel"), self.kernel.clone());
        s.insert(format!("{PREFIX}bias"), self.bias.clone());
        s
    }

    pub fn checksum(&self) -> String {
        self.to_store().checksum(PREFIX)
    }
}

/// `tanh(conv3x3(grid))`, returned as `[H×W×C]`.
pub fn encode(grid: &BevGrid, params: &FrozenEncoderParams) -> Result<Tensor<f32>> {
    let chw = grid.tensor.hwc_to_chw()?;
    let mut tape = Tape::new();
    let x = tape.constant(chw);
    let k = tape.leaf(&params.kernel);
    let b = tape.leaf(&params.bias);
    let y = tape.conv2d(x, k, b, 1, 1)?;
    let y = tape.tanh(y);
    let out = tape.value(y);
    // back to channels-last
    let mut hwc = vec![0f32; out.len()];
    for ch in 0..CHANNELS {
        for i in 0..GRID * GRID {
            hwc[i * CHANNELS + ch] = out.data()[ch * GRID * GRID + i];
        }
    }
    Ok(Tensor::new(&[GRID, GRID, CHANNELS], hwc)?)
}

/// Rasterize and encode with the canonical parameters.
pub fn encode_scene(scene: &Scene, params: &FrozenEncoderParams) -> Result<Tensor<f32>> {
    encode(&rasterize(scene)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{Actor, ActorClass, Status};

    fn scene(actors: Vec<Actor>) -> Scene {
        Scene {
            frame_index: 0,
            ego_speed: 0.0,
            actors,
        }
    }

    fn parked_car(x: f64, y: f64) -> Actor {
        Actor {
            id: 0,
            class: ActorClass::Car,
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            status: Status::Parked,
        }
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let g = rasterize(&scene(vec![])).unwrap();
        assert!(g.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn car_in_front_lands_in_row_11() {
        let g = rasterize(&scene(vec![parked_car(10.0, 0.0)])).unwrap();
        assert_eq!(g.at(11, 16, ActorClass::Car.index()), 1.0);
        for ch in 6..9 {
            assert_eq!(g.at(11, 16, ch), 0.0);
        }
        assert_eq!(g.tensor.sum_f64(), 1.0);
    }

    #[test]
    fn shared_cell_takes_max() {
        let mut a = parked_car(10.2, 5.1);
        a.class = ActorClass::Pedestrian;
        a.status = Status::Standing;
        let mut b = a.clone();
        b.id = 1;
        b.x = 10.9;
        let g = rasterize(&scene(vec![a, b])).unwrap();
        let (r, c) = cell_of(10.2, 5.1).unwrap();
        assert_eq!(g.at(r, c, ActorClass::Pedestrian.index()), 1.0);
    }

    #[test]
    fn outside_extent_rejected() {
        let err = rasterize(&scene(vec![parked_car(-32.0, 0.0)])).unwrap_err();
        assert!(matches!(err, BellaError::OutsideExtent { .. }));
    }

    #[test]
    fn encode_zero_grid_is_zero_and_front_differs_from_back() {
        let p = FrozenEncoderParams::canonical();
        let z = encode_scene(&scene(vec![]), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let f = encode_scene(&scene(vec![parked_car(10.0, 6.0)]), &p).unwrap();
        let b = encode_scene(&scene(vec![parked_car(-10.0, 6.0)]), &p).unwrap();
        assert!(f.max_abs_diff(&b) > 0.0);
        assert!(f.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(f, encode_scene(&scene(vec![parked_car(10.0, 6.0)]), &p).unwrap());
    }

    #[test]
    fn canonical_params_are_stable() {
        assert_eq!(
            FrozenEncoderParams::canonical().checksum(),
            FrozenEncoderParams::canonical().checksum()
        );
    }
}
