use serde::{Deserialize, Serialize};

/// Rigid transform between world coordinates and an agent's ego frame: the
/// ego frame has the agent's position at the origin and its heading along +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoFrame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl EgoFrame {
    pub const IDENTITY: EgoFrame = EgoFrame {
        origin: [0.0, 0.0],
        heading: 0.0,
    };

    pub fn new(origin: [f64; 2], heading: f64) -> Self {
        Self { origin, heading }
    }

    /// Rotates a world-frame vector (velocity, displacement) into the ego frame.
    pub fn vec_to_ego(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn vec_to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        self.vec_to_ego([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let v = self.vec_to_world(p);
        [v[0] + self.origin[0], v[1] + self.origin[1]]
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
