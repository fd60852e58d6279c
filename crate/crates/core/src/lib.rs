pub mod adaptive;
pub mod diagnostics;
pub mod flow;
pub mod generator;
pub mod linalg;
pub mod objectives;
pub mod ode;
pub mod policy;
pub mod schedules;
