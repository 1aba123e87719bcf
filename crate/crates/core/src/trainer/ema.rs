use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::posemodel::SetPredictor;

/// Default teacher decay.
pub const DEFAULT_EMA_DECAY: f64 = 0.996;

/// Student under training plus its exponential-moving-average teacher.
#[derive(Clone, Debug)]
pub struct TeacherStudent {
    pub student: SetPredictor,
    pub teacher: SetPredictor,
    pub ema_decay: f64,
}

impl TeacherStudent {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: SetPredictor, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            ema_decay,
        })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(
            &mut self.teacher.params,
            &self.student.params,
            self.ema_decay,
        )
    }
}

fn check_decay(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "ema decay must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// `teacher ← α·teacher + (1 − α)·student`, parameter by parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    check_decay(alpha)?;
    if !teacher.same_layout(student) {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            lhs: vec![teacher.num_scalars()],
            rhs: vec![student.num_scalars()],
        });
    }
    if alpha == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("layouts match");
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(v.to_vec()));
        p
    }

    #[test]
    fn scalar_case() {
        let mut t = store(&[1.0]);
        ema_update(&mut t, &store(&[0.0]), 0.9).unwrap();
        assert!((t.get("w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn unit_decay_leaves_teacher_unchanged() {
        let mut t = store(&[0.3, -1.2]);
        let before = t.fingerprint();
        ema_update(&mut t, &store(&[5.0, 5.0]), 1.0).unwrap();
        assert_eq!(t.fingerprint(), before);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut t = store(&[1.0]);
        assert!(ema_update(&mut t, &store(&[1.0, 2.0]), 0.5).is_err());
        let mut other = ParamStore::new();
        other.insert("v", Tensor::vector(vec![1.0]));
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn out_of_range_decay_is_rejected() {
        let mut t = store(&[1.0]);
        assert!(ema_update(&mut t, &store(&[0.0]), 1.5).is_err());
    }

    proptest! {
        #[test]
        fn frozen_student_gap_decays_geometrically(
            t0 in -10.0f64..10.0,
            s in -10.0f64..10.0,
            alpha in 0.5f64..0.999,
            steps in 1usize..200,
        ) {
            let mut t = store(&[t0]);
            let st = store(&[s]);
            for _ in 0..steps {
                ema_update(&mut t, &st, alpha).unwrap();
            }
            let gap = t.get("w").unwrap().item() - s;
            let expected = (t0 - s) * alpha.powi(steps as i32);
            prop_assert!((gap - expected).abs() <= 1e-9 * (1.0 + (t0 - s).abs()));
        }
    }
}
