pub mod agents;
pub mod control;
pub mod experiment;
pub mod ma2c;
pub mod net;
pub mod pressure;
pub mod routing;
pub mod scenario;
pub mod sim;
