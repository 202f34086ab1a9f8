//! Butcher tableaus for the explicit Runge-Kutta families.

/// Coefficients of an explicit Runge-Kutta method, optionally with an
/// embedded lower-order solution for error estimation.
#[derive(Debug)]
pub struct Tableau {
    pub name: &'static str,
    pub c: &'static [f64],
    /// Strictly lower-triangular rows; row `i` has `i` entries.
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    /// Weights of the embedded solution.
    pub b_embedded: Option<&'static [f64]>,
    pub order: u32,
    pub embedded_order: u32,
    /// First stage of a step equals the last stage of the previous one.
    pub fsal: bool,
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn is_adaptive(&self) -> bool {
        self.b_embedded.is_some()
    }
}

pub static EULER: Tableau = Tableau {
    name: "euler",
    c: &[0.0],
    a: &[&[]],
    b: &[1.0],
    b_embedded: None,
    order: 1,
    embedded_order: 0,
    fsal: false,
};

pub static RK4: Tableau = Tableau {
    name: "rk4",
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    b_embedded: None,
    order: 4,
    embedded_order: 0,
    fsal: false,
};

/// Heun's method with an embedded Euler step.
pub static ADAPTIVE_HEUN: Tableau = Tableau {
    name: "adaptive_heun",
    c: &[0.0, 1.0],
    a: &[&[], &[1.0]],
    b: &[0.5, 0.5],
    b_embedded: Some(&[1.0, 0.0]),
    order: 2,
    embedded_order: 1,
    fsal: false,
};

/// Bogacki-Shampine 3(2).
pub static BOSH3: Tableau = Tableau {
    name: "bosh3",
    c: &[0.0, 0.5, 0.75, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.75], &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]],
    b: &[2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
    b_embedded: Some(&[7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125]),
    order: 3,
    embedded_order: 2,
    fsal: true,
};

/// Dormand-Prince 5(4).
pub static DOPRI5: Tableau = Tableau {
    name: "dopri5",
    c: &[0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[],
        &[0.2],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ],
    b: &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ],
    b_embedded: Some(&[
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ]),
    order: 5,
    embedded_order: 4,
    fsal: true,
};

/// All tableaus shipped with the integrator.
pub fn solver_tableaus() -> [&'static Tableau; 5] {
    [&EULER, &RK4, &ADAPTIVE_HEUN, &BOSH3, &DOPRI5]
}
