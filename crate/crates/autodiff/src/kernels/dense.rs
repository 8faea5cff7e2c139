use crate::scalar::Scalar;

/// `y (n x out) = x (n x in) * W^T + b`, with `W` stored `out x in`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * fan_out];
    T::gemm(
        n,
        fan_in,
        fan_out,
        T::one(),
        x,
        (fan_in, 1),
        w,
        (1, fan_in),
        T::zero(),
        &mut y,
        (fan_out, 1),
    );
    if let Some(b) = b {
        for row in y.chunks_exact_mut(fan_out) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); n * fan_in];
        T::gemm(
            n,
            fan_out,
            fan_in,
            T::one(),
            dy,
            (fan_out, 1),
            w,
            (fan_in, 1),
            T::zero(),
            &mut dx,
            (fan_in, 1),
        );
        dx
    });
    let dw = need.1.then(|| {
        let mut dw = vec![T::zero(); fan_out * fan_in];
        T::gemm(
            fan_out,
            n,
            fan_in,
            T::one(),
            dy,
            (1, fan_out),
            x,
            (fan_in, 1),
            T::zero(),
            &mut dw,
            (fan_in, 1),
        );
        dw
    });
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); fan_out];
        for row in dy.chunks_exact(fan_out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
