//! Previous-frame CAM selection and temporal max pooling.

use ndarray::Zip;

use crate::domain::Cam;
use crate::error::{Result, TcamError};

/// CAMs of one shot, indexed by frame index starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotCams {
    pub shot_id: String,
    pub start: usize,
    pub cams: Vec<Cam>,
}

impl ShotCams {
    pub fn new(shot_id: impl Into<String>, start: usize, cams: Vec<Cam>) -> Self {
        Self {
            shot_id: shot_id.into(),
            start,
            cams,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.cams.len()
    }

    pub fn get(&self, t: usize) -> Option<&Cam> {
        t.checked_sub(self.start).and_then(|i| self.cams.get(i))
    }
}

/// `[C_t, C_{t-1}, ..., C_{t-m}]` with `m = min(n, t - shot_start)`.
#[derive(Debug, Clone)]
pub struct CamSequence<'a> {
    pub cams: Vec<&'a Cam>,
    pub n: usize,
}

impl CamSequence<'_> {
    pub fn frame_indices(&self) -> Vec<usize> {
        self.cams.iter().map(|c| c.frame_index).collect()
    }
}

/// Selects the CAM of frame `t` and up to `n` predecessors, never crossing
/// the start of the shot.
pub fn select_sequence(shot: &ShotCams, t: usize, n: usize) -> Result<CamSequence<'_>> {
    if t < shot.start || t >= shot.end() {
        return Err(TcamError::FrameOutsideShot {
            t,
            shot_id: shot.shot_id.clone(),
        });
    }
    let first = t.saturating_sub(n).max(shot.start);
    let cams = (first..=t).rev().map(|i| shot.get(i).unwrap()).collect();
    Ok(CamSequence { cams, n })
}

/// Pixel-wise maximum over the sequence; metadata follows `C_t`.
pub fn cam_tmp(seq: &CamSequence<'_>) -> Result<Cam> {
    let (head, rest) = seq.cams.split_first().ok_or(TcamError::EmptySequence)?;
    let mut out = head.values.clone();
    for c in rest {
        if c.values.dim() != out.dim() {
            return Err(TcamError::ShapeMismatch {
                expected: out.shape().to_vec(),
                actual: c.values.shape().to_vec(),
            });
        }
        Zip::from(&mut out)
            .and(&c.values)
            .for_each(|o, &v| *o = o.max(v));
    }
    Ok(Cam {
        values: out,
        frame_index: head.frame_index,
        class_id: head.class_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shot(len: usize) -> ShotCams {
        let cams = (0..len)
            .map(|i| Cam::new(Array2::from_elem((8, 8), i as f32 / len as f32), i, 1).unwrap())
            .collect();
        ShotCams::new("s0", 0, cams)
    }

    #[test]
    fn selection_examples() {
        let s = shot(10);
        assert_eq!(select_sequence(&s, 5, 0).unwrap().frame_indices(), vec![5]);
        assert_eq!(select_sequence(&s, 5, 2).unwrap().frame_indices(), vec![5, 4, 3]);
        assert_eq!(select_sequence(&s, 1, 4).unwrap().frame_indices(), vec![1, 0]);
        assert!(matches!(
            select_sequence(&s, 10, 1),
            Err(TcamError::FrameOutsideShot { .. })
        ));
    }

    #[test]
    fn selection_respects_shot_offset() {
        let mut s = shot(4);
        s.start = 20;
        for (i, c) in s.cams.iter_mut().enumerate() {
            c.frame_index = 20 + i;
        }
        assert_eq!(select_sequence(&s, 21, 5).unwrap().frame_indices(), vec![21, 20]);
        assert!(select_sequence(&s, 3, 0).is_err());
    }

    #[test]
    fn tmp_identity_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Cam::new(Array2::from_shape_fn((8, 8), |_| rng.gen()), 3, 0).unwrap();
        let one = CamSequence { cams: vec![&c], n: 0 };
        assert_eq!(cam_tmp(&one).unwrap(), c);
        let three = CamSequence { cams: vec![&c, &c, &c], n: 2 };
        assert_eq!(cam_tmp(&three).unwrap(), c);
    }

    #[test]
    fn tmp_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cams: Vec<Cam> = (0..3)
            .map(|i| Cam::new(Array2::from_shape_fn((8, 8), |_| rng.gen()), 7 - i, 2).unwrap())
            .collect();
        let seq = CamSequence { cams: cams.iter().collect(), n: 2 };
        let out = cam_tmp(&seq).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let mut m = f32::NEG_INFINITY;
                for c in &cams {
                    if c.values[[y, x]] > m {
                        m = c.values[[y, x]];
                    }
                }
                assert_eq!(out.values[[y, x]], m);
            }
        }
        assert_eq!(out.frame_index, 7);
        assert_eq!(out.class_id, 2);
    }

    #[test]
    fn tmp_errors() {
        let empty = CamSequence { cams: vec![], n: 0 };
        assert!(matches!(cam_tmp(&empty), Err(TcamError::EmptySequence)));
        let a = Cam::new(Array2::zeros((8, 8)), 0, 0).unwrap();
        let b = Cam::new(Array2::zeros((8, 9)), 1, 0).unwrap();
        let seq = CamSequence { cams: vec![&a, &b], n: 1 };
        assert!(matches!(cam_tmp(&seq), Err(TcamError::ShapeMismatch { .. })));
    }
}
