//! Parameter-name based layer helpers on top of the graph.

use crate::autograd::{ConvGeom, Graph, NodeId};
use crate::error::Result;
use crate::params::ParamNodes;
use crate::scalar::Scalar;

pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    name: &str,
    x: NodeId,
    geom: ConvGeom,
) -> Result<NodeId> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.opt(&format!("{name}.bias"));
    g.conv2d(x, w, b, geom)
}

pub fn conv_relu<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    name: &str,
    x: NodeId,
    geom: ConvGeom,
) -> Result<NodeId> {
    let y = conv(g, p, name, x, geom)?;
    Ok(g.relu(y))
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.opt(&format!("{name}.bias"));
    g.linear(x, w, b)
}
