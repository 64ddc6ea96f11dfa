pub mod autodiff;
pub mod corpus;
pub mod nnet;
pub mod optim;
pub mod pse;
pub mod recipes;
pub mod scoring;
pub mod send;
pub mod sendti;
pub mod seeding;
pub mod similarity;
