use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Heading, LinkInput, Network, NetworkError, NodeId};

/// Emergency-capacity coefficients keyed by (tail, head) intersection.
/// Links not listed get coefficient 0.
pub type EcMap = BTreeMap<(NodeId, NodeId), f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length_m: f64,
    pub lanes_per_link: u32,
    /// Vehicles per lane; derived from the link length when absent.
    pub lane_capacity: Option<u32>,
    pub free_flow_speed: f64,
    pub emv_max_speed: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, link_length_m: f64, lanes_per_link: u32) -> GridSpec {
        GridSpec {
            rows,
            cols,
            link_length_m,
            lanes_per_link,
            lane_capacity: None,
            free_flow_speed: 6.0,
            emv_max_speed: 12.0,
        }
    }

    pub fn node(&self, row: usize, col: usize) -> NodeId {
        row * self.cols + col
    }

    /// Link list in construction order: for every node, its outgoing links
    /// in heading order N, E, S, W.
    pub fn link_inputs(&self, ec: &EcMap) -> Vec<LinkInput> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let from = self.node(r, c);
                for heading in Heading::ALL {
                    let target = match heading {
                        Heading::N if r > 0 => Some((r - 1, c)),
                        Heading::E if c + 1 < self.cols => Some((r, c + 1)),
                        Heading::S if r + 1 < self.rows => Some((r + 1, c)),
                        Heading::W if c > 0 => Some((r, c - 1)),
                        _ => None,
                    };
                    if let Some((tr, tc)) = target {
                        let to = self.node(tr, tc);
                        out.push(LinkInput {
                            from,
                            to,
                            heading,
                            length_m: self.link_length_m,
                            lanes: self.lanes_per_link,
                            lane_capacity: self.lane_capacity,
                            ec_coefficient: ec.get(&(from, to)).copied().unwrap_or(0.0),
                            free_flow_speed: self.free_flow_speed,
                            emv_max_speed: self.emv_max_speed,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Bidirectional `rows` x `cols` grid. Node `(r, c)` has id `r * cols + c`,
/// row 0 is the northern edge and column 0 the western edge.
pub fn build_grid(spec: &GridSpec, ec: &EcMap) -> Result<Network, NetworkError> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(NetworkError::InvalidDimensions {
            rows: spec.rows,
            cols: spec.cols,
        });
    }
    let positions: Vec<(usize, usize)> = (0..spec.rows)
        .flat_map(|r| (0..spec.cols).map(move |c| (r, c)))
        .collect();
    Network::from_links(spec.rows * spec.cols, &spec.link_inputs(ec), Some(&positions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, len: f64, lanes: u32, cap: u32) -> Network {
        let mut s = GridSpec::new(rows, cols, len, lanes);
        s.lane_capacity = Some(cap);
        build_grid(&s, &EcMap::new()).unwrap()
    }

    #[test]
    fn five_by_five_counts() {
        let net = grid(5, 5, 200.0, 2, 25);
        assert_eq!(net.node_count(), 25);
        assert_eq!(net.link_count(), 80);
        assert!(net.links.iter().all(|l| l.emergency_capacity == 0.0));
        assert!(net.links.iter().all(|l| l.normal_capacity() == 50));
    }

    #[test]
    fn two_by_two_counts() {
        let net = grid(2, 2, 100.0, 1, 10);
        assert_eq!(net.node_count(), 4);
        assert_eq!(net.link_count(), 8);
    }

    #[test]
    fn link_count_formula() {
        for rows in 2..6 {
            for cols in 2..6 {
                let net = grid(rows, cols, 100.0, 2, 10);
                assert_eq!(net.link_count(), 2 * (rows * (cols - 1) + cols * (rows - 1)));
            }
        }
    }

    #[test]
    fn emergency_capacity_is_coefficient_times_k() {
        let mut s = GridSpec::new(5, 5, 200.0, 2);
        s.lane_capacity = Some(25);
        let mut ec = EcMap::new();
        // eastern column, both directions
        for r in 0..4 {
            ec.insert((s.node(r, 4), s.node(r + 1, 4)), 0.2);
            ec.insert((s.node(r + 1, 4), s.node(r, 4)), 0.2);
        }
        let net = build_grid(&s, &ec).unwrap();
        for l in &net.links {
            let expect = if ec.contains_key(&(l.from, l.to)) { 10.0 } else { 0.0 };
            assert!((l.emergency_capacity - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_dimensions() {
        let s = GridSpec::new(1, 5, 100.0, 1);
        assert!(matches!(
            build_grid(&s, &EcMap::new()),
            Err(NetworkError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn graph_distances() {
        let net = grid(5, 5, 200.0, 2, 25);
        assert_eq!(net.graph_distance(0, 0), Some(0));
        assert_eq!(net.graph_distance(0, 24), Some(8));
        for i in 0..25 {
            for &j in &net.intersection(i).neighbors {
                assert_eq!(net.graph_distance(i, j), Some(1));
            }
        }
    }

    #[test]
    fn corner_node_has_phase_subset() {
        let net = grid(3, 3, 100.0, 2, 10);
        let corner = net.intersection(0);
        assert_eq!(corner.incoming_links.len(), 2);
        assert!(corner.phases.len() >= 2 && corner.phases.len() < 8);
    }
}
