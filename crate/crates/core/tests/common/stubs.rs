//! Scripted segmenters with known IoU trajectories.

use clickprobe::clicks::{BinaryMask, ClickState};
use clickprobe::data::Instance;
use clickprobe::eval::Segmenter;
use clickprobe::tensor::Tensor;
use clickprobe::Result;

/// Returns the ground truth with just enough pixels dropped that the IoU
/// after click `k` is `ious[k - 1]` (the last value repeats).
pub struct Staircase {
    pub ious: Vec<f64>,
}

impl Segmenter for Staircase {
    type Context = BinaryMask;

    fn prepare(&self, instance: &Instance) -> Result<BinaryMask> {
        Ok(instance.gt.clone())
    }

    fn predict(&self, gt: &mut BinaryMask, clicks: &ClickState) -> Result<Vec<f32>> {
        let k = clicks.len().clamp(1, self.ious.len());
        let target = self.ious[k - 1];
        let drop = (gt.area() as f64 * (1.0 - target)).round() as usize;
        let mut dropped = 0;
        Ok(gt
            .data()
            .iter()
            .map(|&b| {
                if b && dropped < drop {
                    dropped += 1;
                    0.0
                } else if b {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Always answers with the ground truth.
pub struct Oracle;

impl Segmenter for Oracle {
    type Context = BinaryMask;
    fn prepare(&self, instance: &Instance) -> Result<BinaryMask> {
        Ok(instance.gt.clone())
    }
    fn predict(&self, gt: &mut BinaryMask, _: &ClickState) -> Result<Vec<f32>> {
        Ok(gt.data().iter().map(|&b| if b { 0.9 } else { 0.1 }).collect())
    }
}

/// Never segments anything.
pub struct Blank;

impl Segmenter for Blank {
    type Context = usize;
    fn prepare(&self, instance: &Instance) -> Result<usize> {
        Ok(instance.gt.data().len())
    }
    fn predict(&self, n: &mut usize, _: &ClickState) -> Result<Vec<f32>> {
        Ok(vec![0.0; *n])
    }
}

/// A square object of area 100 inside a 20 x 20 image.
pub fn square_instance(id: &str) -> Instance {
    let gt = BinaryMask::from_fn(20, 20, |y, x| (5..15).contains(&y) && (4..14).contains(&x));
    Instance { id: id.into(), image: Tensor::full(vec![3, 20, 20], 0.5), gt }
}
