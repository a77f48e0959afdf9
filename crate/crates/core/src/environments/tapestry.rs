use rand::seq::SliceRandom;
use rand::Rng;

/// Interest points scattered over a rectangle, each carrying a symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Tapestry {
    points: Vec<(f64, f64, u32)>,
}

impl Tapestry {
    /// Dart throwing with minimum spacing `radius` over `[x0, x1] x [y0, y1]`.
    /// Symbols cycle through a shuffled copy of `symbols`, so they repeat
    /// only when there are more points than symbols.
    pub fn poisson(
        bounds: (f64, f64, f64, f64),
        radius: f64,
        symbols: std::ops::Range<u32>,
        rng: &mut impl Rng,
    ) -> Self {
        let (x0, y0, x1, y1) = bounds;
        let r2 = radius * radius;
        let mut pts: Vec<(f64, f64)> = Vec::new();
        let mut failures = 0;
        while failures < 4000 {
            let c = (rng.random_range(x0..x1), rng.random_range(y0..y1));
            if pts
                .iter()
                .all(|p| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) >= r2)
            {
                pts.push(c);
                failures = 0;
            } else {
                failures += 1;
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut order: Vec<u32> = symbols.collect();
        order.shuffle(rng);
        let points = pts
            .into_iter()
            .zip(order.iter().copied().cycle())
            .map(|((x, y), s)| (x, y, s))
            .collect();
        Self { points }
    }

    pub fn points(&self) -> &[(f64, f64, u32)] {
        &self.points
    }

    /// Points inside the axis-aligned window centred at `(cx, cy)`, in window
    /// coordinates (origin at the window's lower-left corner).
    pub fn window(&self, cx: f64, cy: f64, w: f64, h: f64) -> Vec<(f64, f64, u32)> {
        let (left, bottom) = (cx - w / 2.0, cy - h / 2.0);
        let start = self.points.partition_point(|p| p.0 < left);
        self.points[start..]
            .iter()
            .take_while(|p| p.0 <= left + w)
            .filter(|p| p.1 >= bottom && p.1 <= bottom + h)
            .map(|&(x, y, s)| (x - left, y - bottom, s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spacing_and_window_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tapestry::poisson((0.0, 0.0, 200.0, 200.0), 20.0, 0..50, &mut rng);
        let pts = t.points();
        assert!(pts.len() > 40);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                assert!((pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1) >= 20.0);
            }
            assert!(pts[i].2 < 50);
        }
        let w = t.window(100.0, 100.0, 60.0, 40.0);
        let naive: Vec<_> = pts
            .iter()
            .filter(|p| (70.0..=130.0).contains(&p.0) && (80.0..=120.0).contains(&p.1))
            .map(|&(x, y, s)| (x - 70.0, y - 80.0, s))
            .collect();
        assert_eq!(w, naive);
    }
}
