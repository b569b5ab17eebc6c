# Tests package for umbra-tts
