pub mod random_scenario;
