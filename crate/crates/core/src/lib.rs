pub mod market_data;
pub mod regression;
pub mod preselect;
pub mod weights;
pub mod backtest;
pub mod analytics;
pub mod fixture;
