# Models package initialization: instructions, blocks, gadgets, states and plans
