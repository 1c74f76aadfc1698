"""Non-gaited contact planning for quadrupeds with MCTS over MPC rollouts."""
