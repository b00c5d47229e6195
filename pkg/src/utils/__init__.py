# Utils package initialization: settings and bit helpers
