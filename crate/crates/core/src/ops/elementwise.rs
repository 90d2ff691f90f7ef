use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            OpKind::Add,
            shape,
            value,
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad.to_vec();
                vec![ctx.needs(0).then(|| g.clone()), ctx.needs(1).then_some(g)]
            }),
        ))
    }

    /// Elementwise (Hadamard) product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            OpKind::Mul,
            shape,
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.input(0), ctx.input(1));
                let ga = ctx
                    .needs(0)
                    .then(|| ctx.grad.iter().zip(y).map(|(&g, &v)| g * v).collect());
                let gb = ctx
                    .needs(1)
                    .then(|| ctx.grad.iter().zip(x).map(|(&g, &v)| g * v).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::of(k);
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            OpKind::Scale,
            shape,
            value,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * k).collect())]),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let n = self.value(a).len();
        self.push(
            OpKind::Sum,
            vec![1],
            vec![s],
            &[a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let inv = T::one() / T::of(n as f64);
        let s: T = self.value(a).iter().copied().sum();
        self.push(
            OpKind::Mean,
            vec![1],
            vec![s * inv],
            &[a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            OpKind::Sigmoid,
            shape,
            value,
            &[a],
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.output)
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                )]
            }),
        )
    }

    /// Gaussian error linear unit, exact form `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            OpKind::Gelu,
            shape,
            value,
            &[a],
            Box::new(|ctx| {
                let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
                let half = T::of(0.5);
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.input(0))
                        .map(|(&g, &x)| {
                            let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
                            let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                            g * (cdf + x * pdf)
                        })
                        .collect(),
                )]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x >= T::zero() { x } else { x * slope })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            OpKind::LeakyRelu,
            shape,
            value,
            &[a],
            Box::new(move |ctx| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.input(0))
                        .map(|(&g, &x)| if x >= T::zero() { g } else { g * slope })
                        .collect(),
                )]
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}
